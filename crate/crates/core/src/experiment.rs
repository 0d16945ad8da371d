//! Builds data, model and optimizer from a [`RunConfig`] and records one
//! metrics row per outer iteration.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::apts::{self, derive_seed, Mode, SyncReport};
use crate::baselines::{self, AdamState};
use crate::config::{DataSource, Optimizer, RunConfig};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::lsr1::SecantMemory;
use crate::model::{self, Batch, LossKind, MlpSpec};
use crate::trust_region::{self, StepOptions, TrState};

pub const CSV_HEADER: [&str; 9] = [
    "epoch",
    "iteration",
    "train_loss",
    "val_accuracy",
    "delta",
    "rho",
    "grad_norm",
    "sync_count",
    "cumulative_wall_seconds",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iteration: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Radius after the iteration; empty for the baselines.
    pub delta: Option<f64>,
    pub rho: Option<f64>,
    pub grad_norm: f64,
    pub sync_count: usize,
    pub cumulative_wall_seconds: f64,
}

impl MetricsRow {
    pub fn fields(&self) -> [String; 9] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.epoch.to_string(),
            self.iteration.to_string(),
            self.train_loss.to_string(),
            self.val_accuracy.to_string(),
            opt(self.delta),
            opt(self.rho),
            self.grad_norm.to_string(),
            self.sync_count.to_string(),
            format!("{:.6}", self.cumulative_wall_seconds),
        ]
    }

    fn from_report(r: &SyncReport) -> Self {
        Self {
            epoch: r.epoch,
            iteration: r.iteration,
            train_loss: r.loss_after,
            val_accuracy: r.val_accuracy.unwrap_or(f64::NAN),
            delta: Some(r.delta_out),
            rho: Some(r.rho),
            grad_norm: r.grad_norm,
            sync_count: r.sync_count,
            cumulative_wall_seconds: r.wall_time.as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub rows: usize,
    pub total_syncs: usize,
    pub final_train_loss: f64,
    pub final_val_accuracy: f64,
}

/// Training and validation sets described by `src`.
pub fn load_data(src: &DataSource) -> Result<(Dataset, Dataset)> {
    match src {
        DataSource::Synthetic {
            train,
            validation,
            dim,
            classes,
            seed,
        } => {
            if *train == 0 || *validation == 0 {
                return Err(Error::Config("synthetic data needs train_samples and val_samples of at least 1".into()));
            }
            let all = data::synth_classification(train + validation, *dim, *classes, *seed)?;
            let tr: Vec<usize> = (0..*train).collect();
            let va: Vec<usize> = (*train..train + validation).collect();
            Ok((all.subset(&tr)?, all.subset(&va)?))
        }
        DataSource::Mnist { dir, train, validation } => {
            let take = |ds: Dataset, n: usize| -> Result<Dataset> {
                if n == 0 || n == ds.len() {
                    return Ok(ds);
                }
                if n > ds.len() {
                    return Err(Error::Config(format!("asked for {n} samples, file holds {}", ds.len())));
                }
                ds.subset(&(0..n).collect::<Vec<_>>())
            };
            let [tri, trl, vai, val] = data::MNIST_FILES.map(|f| dir.join(f));
            let tr = data::load_idx(tri, trl)?;
            let va = data::load_idx(vai, val)?;
            Ok((take(tr, *train)?, take(va, *validation)?))
        }
    }
}

pub fn build_spec(cfg: &RunConfig) -> Result<MlpSpec> {
    MlpSpec::new(cfg.layers.clone(), cfg.activation, LossKind::CrossEntropy)?.with_l2(cfg.l2)
}

/// Runs the configured optimizer, passing each row to `on_row` as soon as
/// it exists.
pub fn execute(cfg: &RunConfig, on_row: &mut dyn FnMut(&MetricsRow) -> Result<()>) -> Result<RunSummary> {
    let spec = build_spec(cfg)?;
    let (train, val) = load_data(&cfg.data)?;
    execute_with(cfg, &spec, &train, &val, on_row)
}

/// [`execute`] on already loaded data.
pub fn execute_with(
    cfg: &RunConfig,
    spec: &MlpSpec,
    train: &Dataset,
    val: &Dataset,
    on_row: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<RunSummary> {
    let theta0 = model::init_params(spec, cfg.apts.seed);
    let mut summary = RunSummary {
        rows: 0,
        total_syncs: 0,
        final_train_loss: f64::NAN,
        final_val_accuracy: f64::NAN,
    };
    let mut emit = |row: MetricsRow| -> Result<()> {
        summary.rows += 1;
        summary.total_syncs += row.sync_count;
        summary.final_train_loss = row.train_loss;
        summary.final_val_accuracy = row.val_accuracy;
        on_row(&row)
    };
    let val_batch = Batch::all(val);
    let started = Instant::now();
    let a = &cfg.apts;
    match cfg.optimizer {
        Optimizer::Apts => {
            apts::run(a, spec, train, Some(val), theta0, &mut |r| emit(MetricsRow::from_report(r)))?;
        }
        Optimizer::Tr => {
            a.validate(train.len())?;
            let mut theta = theta0;
            let mut delta = a.delta0;
            let mut iteration = 0;
            let batches_for = |epoch: usize| -> Result<Vec<Vec<usize>>> {
                match a.mode {
                    Mode::Deterministic => Ok(vec![(0..train.len()).collect()]),
                    Mode::Stochastic => data::minibatch_stream(
                        train.len(),
                        a.minibatch_size,
                        a.overlap_fraction,
                        derive_seed(a.seed, epoch as u64, u64::MAX),
                    ),
                }
            };
            let mut mem = SecantMemory::new(a.memory);
            'epochs: for epoch in 0..a.max_epochs {
                for ix in batches_for(epoch)? {
                    let obj = apts::DataObjective::new(spec, Batch::select(train, &ix));
                    if a.mode == Mode::Stochastic {
                        mem.reset();
                    }
                    let mut st = TrState::new(&obj, theta, delta, mem)?;
                    if a.mode == Mode::Deterministic && st.grad_norm <= a.grad_tol {
                        break 'epochs;
                    }
                    let out = trust_region::tr_step(&obj, &mut st, &a.tr, StepOptions::new(a.model_order))?;
                    emit(MetricsRow {
                        epoch,
                        iteration,
                        train_loss: st.loss,
                        val_accuracy: model::accuracy(spec, &st.theta, &val_batch)?,
                        delta: Some(st.delta),
                        rho: Some(out.rho),
                        grad_norm: st.grad_norm,
                        sync_count: 1,
                        cumulative_wall_seconds: started.elapsed().as_secs_f64(),
                    })?;
                    iteration += 1;
                    theta = st.theta;
                    delta = st.delta;
                    mem = st.mem;
                }
            }
        }
        Optimizer::Sgd | Optimizer::Adam => {
            if cfg.batch_size == 0 || cfg.batch_size > train.len() {
                return Err(Error::Config(format!(
                    "batch_size {} must lie in 1..={}",
                    cfg.batch_size,
                    train.len()
                )));
            }
            let mut theta = theta0;
            let mut adam = AdamState::new(theta.len());
            let mut iteration = 0;
            for epoch in 0..a.max_epochs {
                let seed = derive_seed(a.seed, epoch as u64, u64::MAX);
                for ix in data::minibatch_stream(train.len(), cfg.batch_size, 0.0, seed)? {
                    let batch = Batch::select(train, &ix);
                    let (_, grad) = model::loss_and_grad(spec, &theta, &batch)?;
                    theta = if cfg.optimizer == Optimizer::Sgd {
                        baselines::sgd_step(&theta, &grad, cfg.sgd_lr)?
                    } else {
                        baselines::adam_step(&mut adam, &theta, &grad, &cfg.adam)?
                    };
                    let loss = model::loss(spec, &theta, &batch)?;
                    if !loss.is_finite() {
                        return Err(Error::numerical("baseline loss became non-finite", &theta));
                    }
                    emit(MetricsRow {
                        epoch,
                        iteration,
                        train_loss: loss,
                        val_accuracy: model::accuracy(spec, &theta, &val_batch)?,
                        delta: None,
                        rho: None,
                        grad_norm: crate::linalg::norm(&grad),
                        sync_count: 1,
                        cumulative_wall_seconds: started.elapsed().as_secs_f64(),
                    })?;
                    iteration += 1;
                }
            }
        }
    }
    Ok(summary)
}

/// Path of the resolved-configuration file written next to `output`.
pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".meta");
    PathBuf::from(name)
}

/// Writes the metrics CSV and its sidecar. Rows are flushed as they are
/// produced, so a failed run leaves the rows it finished.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary> {
    let spec = build_spec(cfg)?;
    let (train, val) = load_data(&cfg.data)?;
    std::fs::write(sidecar_path(&cfg.output), cfg.to_text())?;
    let mut writer = csv::Writer::from_writer(File::create(&cfg.output)?);
    writer.write_record(CSV_HEADER)?;
    writer.flush()?;
    execute_with(cfg, &spec, &train, &val, &mut |row| {
        writer.write_record(row.fields())?;
        writer.flush()?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::parse(
            "train_samples = 120\nval_samples = 40\nsynth_dim = 4\nsynth_classes = 3\nlayers = 4,6,3\nmax_epochs = 3\n",
        )
        .unwrap();
        cfg.apts.threads = Some(1);
        cfg
    }

    #[test]
    fn one_row_per_iteration() {
        let mut cfg = small();
        for (opt, rows, syncs) in [
            (Optimizer::Apts, 3, 6),
            (Optimizer::Tr, 3, 3),
            (Optimizer::Sgd, 3 * 2, 6),
            (Optimizer::Adam, 3 * 2, 6),
        ] {
            cfg.optimizer = opt;
            cfg.batch_size = 60;
            let mut seen = Vec::new();
            let sum = execute(&cfg, &mut |r| {
                seen.push(r.clone());
                Ok(())
            })
            .unwrap();
            assert_eq!(sum.rows, rows, "{opt:?}");
            assert_eq!(sum.total_syncs, syncs, "{opt:?}");
            assert!(seen.iter().all(|r| (0.0..=1.0).contains(&r.val_accuracy)));
            let iters: Vec<usize> = seen.iter().map(|r| r.iteration).collect();
            assert_eq!(iters, (0..rows).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sink_error_stops_the_run() {
        let cfg = small();
        let mut n = 0;
        let err = execute(&cfg, &mut |_| {
            n += 1;
            if n == 2 {
                Err(Error::invalid("stop"))
            } else {
                Ok(())
            }
        });
        assert!(err.is_err());
        assert_eq!(n, 2);
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(sidecar_path(Path::new("out/m.csv")), PathBuf::from("out/m.csv.meta"));
    }

    #[test]
    fn row_fields_leave_baseline_columns_empty() {
        let row = MetricsRow {
            epoch: 0,
            iteration: 1,
            train_loss: 0.5,
            val_accuracy: 1.0,
            delta: None,
            rho: None,
            grad_norm: 2.0,
            sync_count: 1,
            cumulative_wall_seconds: 0.25,
        };
        assert_eq!(row.fields(), ["0", "1", "0.5", "1", "", "", "2", "1", "0.250000"].map(String::from));
    }
}
