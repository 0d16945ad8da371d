//! Fast invariant checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::apts::{self, AptsConfig, SyncReport};
use crate::data;
use crate::linalg::{self, dot, norm, DenseMatrix};
use crate::lsr1::SecantMemory;
use crate::model::{self, Activation, LossKind, MlpSpec};
use crate::obs;
use crate::Result;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn small_run(cfg: &AptsConfig, seed: u64) -> Result<Vec<SyncReport>> {
    let spec = MlpSpec::new(vec![5, 8, 3], Activation::Tanh, LossKind::CrossEntropy)?;
    let ds = data::synth_classification(90, 5, 3, seed)?;
    let theta0 = model::init_params(&spec, seed);
    Ok(apts::run(cfg, &spec, &ds, None, theta0, &mut |_| Ok(()))?.reports)
}

fn random_memory(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<SecantMemory> {
    let mut mem = SecantMemory::new(m);
    for _ in 0..2 * m {
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        mem.push_pair(&s, &y)?;
    }
    Ok(mem)
}

fn dense(mem: &SecantMemory, n: usize) -> DenseMatrix {
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            mem.hessian_vec(&e)
        })
        .collect();
    DenseMatrix::from_columns(&cols)
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("first-order consistency", || {
            let mut worst: f64 = 0.0;
            for (k, n) in [1, 2, 3, 5].into_iter().enumerate() {
                let cfg = AptsConfig {
                    subdomains: n,
                    max_epochs: 2,
                    threads: Some(1),
                    ..AptsConfig::default()
                };
                for r in small_run(&cfg, k as u64)? {
                    let g = r.workers.iter().map(|w| w.consistency_error).fold(0.0, f64::max);
                    worst = worst.max(g);
                }
            }
            Ok((worst <= 1e-10, format!("max deviation {worst:.3e}")))
        }),
        check("step bound", || {
            let cfg = AptsConfig {
                subdomains: 4,
                max_epochs: 6,
                threads: Some(1),
                ..AptsConfig::default()
            };
            let reports = small_run(&cfg, 7)?;
            let ok = reports.iter().all(|r| {
                r.trial_step_norm <= r.delta_in * (1.0 + 1e-8)
                    && r.workers.iter().all(|w| w.initial_radius == r.delta_in / 4.0)
            });
            Ok((ok, format!("{} iterations", reports.len())))
        }),
        check("subproblem vs dense oracle", || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut worst: f64 = 0.0;
            for _ in 0..50 {
                let n = rng.gen_range(2..20);
                let mem = random_memory(n, rng.gen_range(1..6), &mut rng)?;
                let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let delta = rng.gen_range(0.05..3.0);
                let b = dense(&mem, n);
                let s = obs::solve(&g, &mem, delta)?.step;
                let o = obs::solve_dense_oracle(&g, &b, delta)?.step;
                let m = |s: &[f64]| dot(&g, s) + 0.5 * dot(s, &b.matvec(s));
                worst = worst.max((m(&s) - m(&o)).abs() / (1.0 + m(&o).abs()));
                if norm(&s) > delta * (1.0 + 1e-10) {
                    return Ok((false, format!("infeasible step {} > {delta}", norm(&s))));
                }
            }
            Ok((worst <= 1e-8, format!("max model gap {worst:.3e}")))
        }),
        check("secant equation", || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let mut mem = SecantMemory::new(5);
                for _ in 0..8 {
                    let s: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let y: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    if mem.push_pair(&s, &y)? {
                        let gap = norm(&linalg::sub(&mem.hessian_vec(&s), &y)) / (norm(&y) + 1.0);
                        worst = worst.max(gap);
                    }
                }
            }
            Ok((worst <= 1e-9, format!("max residual {worst:.3e}")))
        }),
        check("monotone descent", || {
            let cfg = AptsConfig {
                max_epochs: 15,
                threads: Some(1),
                ..AptsConfig::default()
            };
            let reports = small_run(&cfg, 5)?;
            let ok = reports.iter().all(|r| r.loss_after <= r.loss_before);
            let last = reports.last().map_or(f64::NAN, |r| r.loss_after);
            Ok((ok, format!("final loss {last:.6}")))
        }),
        check("thread-count determinism", || {
            let base = AptsConfig {
                subdomains: 4,
                max_epochs: 4,
                ..AptsConfig::default()
            };
            let strip = |mut v: Vec<SyncReport>| {
                v.iter_mut().for_each(|r| r.wall_time = Default::default());
                v
            };
            let one = strip(small_run(&AptsConfig { threads: Some(1), ..base.clone() }, 9)?);
            let four = strip(small_run(&AptsConfig { threads: Some(4), ..base }, 9)?);
            Ok((one == four, "1 vs 4 threads".into()))
        }),
    ]
}
