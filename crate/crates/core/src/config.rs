//! Experiment configuration as flat `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, so an empty file is a valid configuration. Unknown keys are
//! errors.
//!
//! Switching `dataset` resets the dataset keys, and moves `layers` to the
//! new kind's default network unless it was set to something else.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::apts::{AptsConfig, Mode};
use crate::baselines::AdamParams;
use crate::error::{Error, Result};
use crate::model::Activation;
use crate::trust_region::{ModelOrder, TrParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Apts,
    Tr,
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        train: usize,
        validation: usize,
        dim: usize,
        classes: usize,
        seed: u64,
    },
    Mnist {
        dir: PathBuf,
        /// Leading samples taken from the training files; 0 takes all.
        train: usize,
        /// Leading samples taken from the test files; 0 takes all.
        validation: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub optimizer: Optimizer,
    pub apts: AptsConfig,
    pub data: DataSource,
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub l2: f64,
    /// Minibatch size of the SGD and Adam baselines.
    pub batch_size: usize,
    pub sgd_lr: f64,
    pub adam: AdamParams,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Apts,
            apts: AptsConfig::default(),
            data: DataSource::Synthetic {
                train: 2000,
                validation: 500,
                dim: 20,
                classes: 4,
                seed: 1,
            },
            layers: SYNTHETIC_LAYERS.to_vec(),
            activation: Activation::Relu,
            l2: 0.0,
            batch_size: 100,
            sgd_lr: 0.1,
            adam: AdamParams::default(),
            output: PathBuf::from("metrics.csv"),
        }
    }
}

const SYNTHETIC_LAYERS: [usize; 3] = [20, 32, 4];
/// Same order of magnitude as the 535'818 parameters of the reference MNIST net.
pub const MNIST_LAYERS: [usize; 3] = [784, 640, 10];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key `{key}`")))
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|&(_, v)| v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("key `{key}` must be one of {}, got {value:?}", names.join(" | ")))
        })
}

const OPTIMIZERS: &[(&str, Optimizer)] = &[
    ("apts", Optimizer::Apts),
    ("tr", Optimizer::Tr),
    ("sgd", Optimizer::Sgd),
    ("adam", Optimizer::Adam),
];
const MODES: &[(&str, Mode)] = &[("deterministic", Mode::Deterministic), ("stochastic", Mode::Stochastic)];
const ORDERS: &[(&str, ModelOrder)] = &[("first", ModelOrder::FirstOrder), ("second", ModelOrder::SecondOrder)];
const ACTIVATIONS: &[(&str, Activation)] = &[("relu", Activation::Relu), ("tanh", Activation::Tanh)];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], v: T) -> &'static str {
    options.iter().find(|(_, x)| *x == v).map(|(n, _)| *n).expect("every variant is listed")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.apts;
        let tr = &mut a.tr;
        match key {
            "optimizer" => self.optimizer = choice(key, value, OPTIMIZERS)?,
            "mode" => a.mode = choice(key, value, MODES)?,
            "model_order" => a.model_order = choice(key, value, ORDERS)?,
            "subdomains" => a.subdomains = parse(key, value)?,
            "nu" => a.nu = parse(key, value)?,
            "overlap" => a.overlap_fraction = parse(key, value)?,
            "minibatch_size" => a.minibatch_size = parse(key, value)?,
            "seed" => a.seed = parse(key, value)?,
            "max_epochs" => a.max_epochs = parse(key, value)?,
            "delta0" => a.delta0 = parse(key, value)?,
            "memory" => a.memory = parse(key, value)?,
            "grad_tol" => a.grad_tol = parse(key, value)?,
            "eta1" => tr.eta1 = parse(key, value)?,
            "eta2" => tr.eta2 = parse(key, value)?,
            "alpha" => tr.alpha = parse(key, value)?,
            "beta" => tr.beta = parse(key, value)?,
            "delta_min" => tr.delta_min = parse(key, value)?,
            "delta_max" => tr.delta_max = parse(key, value)?,
            "dataset" => {
                let (data, from, to) = match (value, &self.data) {
                    ("synthetic", DataSource::Synthetic { .. }) | ("mnist", DataSource::Mnist { .. }) => return Ok(()),
                    ("synthetic", _) => (RunConfig::default().data, MNIST_LAYERS, SYNTHETIC_LAYERS),
                    ("mnist", _) => (
                        DataSource::Mnist {
                            dir: PathBuf::from("data/mnist"),
                            train: 0,
                            validation: 0,
                        },
                        SYNTHETIC_LAYERS,
                        MNIST_LAYERS,
                    ),
                    _ => {
                        return Err(Error::Config(format!(
                            "key `dataset` must be one of synthetic | mnist, got {value:?}"
                        )))
                    }
                };
                self.data = data;
                if self.layers == from {
                    self.layers = to.to_vec();
                }
            }
            "train_samples" => match &mut self.data {
                DataSource::Synthetic { train, .. } | DataSource::Mnist { train, .. } => *train = parse(key, value)?,
            },
            "val_samples" => match &mut self.data {
                DataSource::Synthetic { validation, .. } | DataSource::Mnist { validation, .. } => {
                    *validation = parse(key, value)?
                }
            },
            "synth_dim" | "synth_classes" | "synth_seed" => match &mut self.data {
                DataSource::Synthetic { dim, classes, seed, .. } => match key {
                    "synth_dim" => *dim = parse(key, value)?,
                    "synth_classes" => *classes = parse(key, value)?,
                    _ => *seed = parse(key, value)?,
                },
                DataSource::Mnist { .. } => {
                    return Err(Error::Config(format!("key `{key}` requires dataset = synthetic")))
                }
            },
            "mnist_dir" => match &mut self.data {
                DataSource::Mnist { dir, .. } => *dir = PathBuf::from(value),
                DataSource::Synthetic { .. } => {
                    return Err(Error::Config("key `mnist_dir` requires dataset = mnist".into()))
                }
            },
            "layers" => {
                self.layers = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "activation" => self.activation = choice(key, value, ACTIVATIONS)?,
            "l2" => self.l2 = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "sgd_lr" => self.sgd_lr = parse(key, value)?,
            "adam_lr" => self.adam.lr = parse(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "output" => self.output = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Fully resolved configuration; [`RunConfig::parse`] reads it back to
    /// an equal value.
    pub fn to_text(&self) -> String {
        let a = &self.apts;
        let tr: &TrParams = &a.tr;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("optimizer", name_of(OPTIMIZERS, self.optimizer).into());
        put("mode", name_of(MODES, a.mode).into());
        put("model_order", name_of(ORDERS, a.model_order).into());
        put("subdomains", a.subdomains.to_string());
        put("nu", a.nu.to_string());
        put("overlap", a.overlap_fraction.to_string());
        put("minibatch_size", a.minibatch_size.to_string());
        put("seed", a.seed.to_string());
        put("max_epochs", a.max_epochs.to_string());
        put("delta0", a.delta0.to_string());
        put("memory", a.memory.to_string());
        put("grad_tol", a.grad_tol.to_string());
        put("eta1", tr.eta1.to_string());
        put("eta2", tr.eta2.to_string());
        put("alpha", tr.alpha.to_string());
        put("beta", tr.beta.to_string());
        put("delta_min", tr.delta_min.to_string());
        put("delta_max", tr.delta_max.to_string());
        match &self.data {
            DataSource::Synthetic {
                train,
                validation,
                dim,
                classes,
                seed,
            } => {
                put("dataset", "synthetic".into());
                put("train_samples", train.to_string());
                put("val_samples", validation.to_string());
                put("synth_dim", dim.to_string());
                put("synth_classes", classes.to_string());
                put("synth_seed", seed.to_string());
            }
            DataSource::Mnist { dir, train, validation } => {
                put("dataset", "mnist".into());
                put("mnist_dir", dir.display().to_string());
                put("train_samples", train.to_string());
                put("val_samples", validation.to_string());
            }
        }
        let layers: Vec<String> = self.layers.iter().map(usize::to_string).collect();
        put("layers", layers.join(","));
        put("activation", name_of(ACTIVATIONS, self.activation).into());
        put("l2", self.l2.to_string());
        put("batch_size", self.batch_size.to_string());
        put("sgd_lr", self.sgd_lr.to_string());
        put("adam_lr", self.adam.lr.to_string());
        put("adam_beta1", self.adam.beta1.to_string());
        put("adam_beta2", self.adam.beta2.to_string());
        put("adam_eps", self.adam.eps.to_string());
        put("output", self.output.display().to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("nu = 3\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn bad_values_are_reported() {
        assert!(RunConfig::parse("nu = five").is_err());
        assert!(RunConfig::parse("optimizer = lbfgs").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("mnist_dir = /tmp").is_err());
        assert!(RunConfig::parse("dataset = mnist\nsynth_dim = 3").is_err());
    }

    #[test]
    fn dataset_switch_moves_default_layers_only() {
        let cfg = RunConfig::parse("dataset = mnist").unwrap();
        assert_eq!(cfg.layers, MNIST_LAYERS);
        let cfg = RunConfig::parse("layers = 784,64,10\ndataset = mnist").unwrap();
        assert_eq!(cfg.layers, vec![784, 64, 10]);
        let cfg = RunConfig::parse("dataset = mnist\ndataset = synthetic").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let text = "\
optimizer = apts
mode = stochastic
model_order = first
subdomains = 8
overlap = 0.05
minibatch_size = 2000
dataset = mnist
mnist_dir = /data/mnist
train_samples = 10000
val_samples = 2000
layers = 784, 64, 10
delta0 = 0.3
adam_eps = 1e-7
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.layers, vec![784, 64, 10]);
        assert_eq!(cfg.apts.mode, Mode::Stochastic);
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), cfg.to_text());
        let synth = RunConfig::default();
        assert_eq!(RunConfig::parse(&synth.to_text()).unwrap(), synth);
    }
}
