//! Additively preconditioned trust-region training over data subdomains.
//!
//! Each outer iteration broadcasts the global iterate to `N` workers. Worker
//! `i` minimizes the corrected local loss
//!
//! ```text
//! fᵢ(θ) = f(θ; 𝒟ᵢ) + rᵢᵀ(θ − θᵏ),   rᵢ = ∇f(θᵏ; D) − ∇f(θᵏ; 𝒟ᵢ)
//! ```
//!
//! for at most `ν` trust-region steps inside a ball of radius `Δᵏ/N`. The
//! local steps are summed, the sum is accepted or rejected by comparing the
//! global decrease with the summed local decreases, and one ordinary
//! trust-region step on `f(·; D)` finishes the iteration.

use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm};
use crate::lsr1::{SecantMemory, DEFAULT_MEMORY};
use crate::model::{self, Batch, MlpSpec};
use crate::trust_region::{self, ModelOrder, Objective, StepOptions, TrParams, TrState};

/// Denominators of the decrease ratio at or below this are treated as zero.
pub const RHO_DENOMINATOR_EPS: f64 = 1e-14;

/// Synchronization points per outer iteration: one gather of local
/// results and one broadcast of the new iterate.
pub const SYNCS_PER_ITERATION: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One iteration per epoch on the full training set.
    Deterministic,
    /// Iterate over overlapping minibatches; subdomains are microbatches.
    Stochastic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AptsConfig {
    pub subdomains: usize,
    pub nu: usize,
    pub tr: TrParams,
    pub overlap_fraction: f64,
    pub mode: Mode,
    /// Only read in stochastic mode.
    pub minibatch_size: usize,
    pub model_order: ModelOrder,
    pub seed: u64,
    pub max_epochs: usize,
    /// Initial global radius `Δ⁰`.
    pub delta0: f64,
    pub memory: usize,
    /// Deterministic mode stops once `‖∇f‖` falls to this value.
    pub grad_tol: f64,
    /// Worker threads; `None` runs one thread per subdomain.
    pub threads: Option<usize>,
}

impl Default for AptsConfig {
    fn default() -> Self {
        Self {
            subdomains: 2,
            nu: 5,
            tr: TrParams::default(),
            overlap_fraction: 0.05,
            mode: Mode::Deterministic,
            minibatch_size: 10_000,
            model_order: ModelOrder::SecondOrder,
            seed: 0,
            max_epochs: 10,
            delta0: 1.0,
            memory: DEFAULT_MEMORY,
            grad_tol: 1e-6,
            threads: None,
        }
    }
}

impl AptsConfig {
    pub fn validate(&self, samples: usize) -> Result<()> {
        self.tr.validate()?;
        if self.subdomains == 0 {
            return Err(Error::invalid("subdomain count must be at least 1"));
        }
        if self.nu == 0 {
            return Err(Error::invalid("local iteration cap must be at least 1"));
        }
        if !(0.0..=0.5).contains(&self.overlap_fraction) {
            return Err(Error::invalid(format!(
                "overlap fraction must lie in [0, 0.5], got {}",
                self.overlap_fraction
            )));
        }
        if !(self.delta0 >= self.tr.delta_min && self.delta0 <= self.tr.delta_max) {
            return Err(Error::invalid(format!(
                "initial radius {} outside [{}, {}]",
                self.delta0, self.tr.delta_min, self.tr.delta_max
            )));
        }
        if self.memory == 0 && self.model_order == ModelOrder::SecondOrder {
            return Err(Error::invalid("second-order models need a secant memory of at least 1"));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::invalid("gradient tolerance must be non-negative"));
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("thread count must be at least 1"));
        }
        let pool = match self.mode {
            Mode::Deterministic => samples,
            Mode::Stochastic => {
                if self.minibatch_size == 0 || self.minibatch_size > samples {
                    return Err(Error::invalid(format!(
                        "minibatch size {} must lie in 1..={samples}",
                        self.minibatch_size
                    )));
                }
                // the final, possibly truncated, minibatch must still feed every worker
                let overlap = data::overlap_count(self.overlap_fraction, self.minibatch_size);
                let stride = self.minibatch_size - overlap;
                let mut start = 0;
                while start + self.minibatch_size < samples && start + stride + overlap < samples {
                    start += stride;
                }
                (samples - start).min(self.minibatch_size)
            }
        };
        if self.subdomains > pool {
            return Err(Error::invalid(format!(
                "cannot split {pool} samples into {} subdomains",
                self.subdomains
            )));
        }
        Ok(())
    }
}

/// Mean network loss over a fixed set of samples.
#[derive(Clone, Copy)]
pub struct DataObjective<'a> {
    spec: &'a MlpSpec,
    batch: Batch<'a>,
}

impl<'a> DataObjective<'a> {
    pub fn new(spec: &'a MlpSpec, batch: Batch<'a>) -> Self {
        Self { spec, batch }
    }
}

impl Objective for DataObjective<'_> {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        model::loss_and_grad(self.spec, theta, &self.batch)
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        model::loss(self.spec, theta, &self.batch)
    }
}

/// `f(θ) + rᵀ(θ − θ₀)` for any base objective `f`.
pub struct CorrectedObjective<'a> {
    base: &'a dyn Objective,
    r: &'a [f64],
    theta0: &'a [f64],
}

impl<'a> CorrectedObjective<'a> {
    pub fn new(base: &'a dyn Objective, r: &'a [f64], theta0: &'a [f64]) -> Self {
        Self { base, r, theta0 }
    }

    fn shift(&self, theta: &[f64]) -> f64 {
        dot(self.r, &linalg::sub(theta, self.theta0))
    }
}

impl Objective for CorrectedObjective<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (f, mut g) = self.base.value_and_grad(theta)?;
        linalg::axpy(1.0, self.r, &mut g);
        Ok((f + self.shift(theta), g))
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.base.value(theta)? + self.shift(theta))
    }
}

/// `rᵢ = ∇f(θ; D) − ∇f(θ; 𝒟ᵢ)`.
pub fn consistency_term(global_grad: &[f64], local_grad: &[f64]) -> Result<Vec<f64>> {
    linalg::ensure_same_len(global_grad, local_grad, "consistency term")?;
    Ok(linalg::sub(global_grad, local_grad))
}

/// Corrected local loss `f(θᵢⱼ; 𝒟ᵢ) + rᵢᵀ(θᵢⱼ − θᵢ₀)`.
pub fn local_loss(
    spec: &MlpSpec,
    theta_ij: &[f64],
    theta_i0: &[f64],
    r_i: &[f64],
    data_i: &Batch<'_>,
) -> Result<f64> {
    linalg::ensure_same_len(theta_ij, theta_i0, "local loss")?;
    linalg::ensure_same_len(theta_ij, r_i, "local loss")?;
    let base = DataObjective::new(spec, *data_i);
    CorrectedObjective::new(&base, r_i, theta_i0).value(theta_ij)
}

/// Global decrease over the summed local decreases; zero when the local
/// solvers made no progress.
pub fn decrease_ratio(loss_before: f64, loss_after: f64, local_decreases: &[f64]) -> f64 {
    let denom: f64 = local_decreases.iter().copied().collect::<linalg::CompensatedSum>().value();
    if denom <= RHO_DENOMINATOR_EPS {
        0.0
    } else {
        (loss_before - loss_after) / denom
    }
}

/// Accept-or-keep rule for the combined step, with the radius update.
pub fn tentative_update(theta: &[f64], s_tilde: &[f64], delta: f64, rho: f64, params: &TrParams) -> (Vec<f64>, f64) {
    let theta_tilde = if rho >= params.eta1 {
        linalg::add(theta, s_tilde)
    } else {
        theta.to_vec()
    };
    (theta_tilde, params.update_radius(delta, rho))
}

/// One of the `N` network copies.
#[derive(Debug, Clone)]
pub struct SubdomainWorker {
    pub id: usize,
    pub indices: Vec<usize>,
    pub theta_local: Vec<f64>,
    pub r: Vec<f64>,
    pub delta_local: f64,
    pub params: TrParams,
    pub mem: SecantMemory,
}

impl SubdomainWorker {
    pub fn new(id: usize, indices: Vec<usize>, global: &TrParams, n: usize, memory: usize) -> Self {
        Self {
            id,
            indices,
            theta_local: Vec::new(),
            r: Vec::new(),
            delta_local: 0.0,
            params: global.with_bounds_divided(n),
            mem: SecantMemory::new(memory),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerReport {
    pub id: usize,
    pub step_norm: f64,
    pub local_decrease: f64,
    pub iters: usize,
    pub initial_radius: f64,
    /// `‖∇fᵢ(θᵏ) − ∇f(θᵏ; D)‖`
    pub consistency_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncReport {
    pub epoch: usize,
    /// Counts outer iterations from 0 across the whole run.
    pub iteration: usize,
    /// Radius the iteration started with.
    pub delta_in: f64,
    pub rho: f64,
    /// Whether the combined step was taken.
    pub accepted: bool,
    pub global_step_accepted: bool,
    pub trial_step_norm: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    /// `‖∇f(θᵏ⁺¹; D)‖`
    pub grad_norm: f64,
    pub delta_out: f64,
    pub workers: Vec<WorkerReport>,
    pub sync_count: usize,
    pub val_accuracy: Option<f64>,
    pub wall_time: Duration,
}

/// Everything one outer iteration needs besides mutable state.
pub struct IterationInputs<'a> {
    pub spec: &'a MlpSpec,
    pub data: &'a Dataset,
    pub nu: usize,
    pub tr: &'a TrParams,
    pub order: ModelOrder,
    /// Objective defining secant `y` for the global step, if not `f(·; D)`.
    pub curvature: Option<&'a dyn Objective>,
}

/// Outer iteration from `global`, whose loss and gradient must be those of
/// `global_obj` at `global.theta`. Returns the report without the epoch,
/// iteration counter, validation accuracy or timing filled in.
pub fn apts_iteration(
    inputs: &IterationInputs<'_>,
    global_obj: &dyn Objective,
    workers: &mut [SubdomainWorker],
    global: &mut TrState,
    pool: Option<&rayon::ThreadPool>,
) -> Result<SyncReport> {
    let n = workers.len();
    if n == 0 {
        return Err(Error::invalid("no subdomain workers"));
    }
    let theta_k = global.theta.clone();
    let delta_k = global.delta;
    let loss_k = global.loss;
    let grad_k = &global.grad;
    let budget = delta_k / n as f64;

    // broadcast θᵏ and Δᵏ/N
    for w in workers.iter_mut() {
        w.theta_local.clone_from(&theta_k);
        w.delta_local = budget;
    }

    let work = |w: &mut SubdomainWorker| -> Result<(Vec<f64>, WorkerReport)> {
        let base = DataObjective::new(inputs.spec, Batch::select(inputs.data, &w.indices));
        let (f_i, g_i) = base.value_and_grad(&w.theta_local)?;
        w.r = consistency_term(grad_k, &g_i)?;
        let local = CorrectedObjective::new(&base, &w.r, &theta_k);
        let mut g_corrected = g_i;
        linalg::axpy(1.0, &w.r, &mut g_corrected);
        let consistency_error = norm(&linalg::sub(&g_corrected, grad_k));
        let run = trust_region::local_train_from(
            &local,
            &theta_k,
            f_i,
            g_corrected,
            w.delta_local,
            &w.params,
            inputs.nu,
            inputs.order,
            &mut w.mem,
        )?;
        w.theta_local = linalg::add(&theta_k, &run.step);
        let report = WorkerReport {
            id: w.id,
            step_norm: norm(&run.step),
            local_decrease: run.local_decrease,
            iters: run.iters,
            initial_radius: run.initial_radius,
            consistency_error,
        };
        Ok((run.step, report))
    };
    let results: Vec<Result<(Vec<f64>, WorkerReport)>> = match pool {
        Some(pool) => pool.install(|| workers.par_iter_mut().map(work).collect()),
        None => workers.iter_mut().map(work).collect(),
    };

    // gather, reduced in ascending worker id
    let mut s_tilde = vec![0.0; theta_k.len()];
    let mut reports = Vec::with_capacity(n);
    for (w, res) in workers.iter().zip(results) {
        let (step, report) = res.map_err(|e| Error::Worker {
            worker: w.id,
            source: Box::new(e),
        })?;
        linalg::axpy(1.0, &step, &mut s_tilde);
        reports.push(report);
    }
    let decreases: Vec<f64> = reports.iter().map(|r| r.local_decrease).collect();

    let trial = linalg::add(&theta_k, &s_tilde);
    let (trial_loss, trial_grad) = global_obj.value_and_grad(&trial)?;
    if !trial_loss.is_finite() {
        return Err(Error::numerical("non-finite loss at the combined step", &trial));
    }
    let rho = decrease_ratio(loss_k, trial_loss, &decreases);
    let (theta_tilde, delta_tilde) = tentative_update(&theta_k, &s_tilde, delta_k, rho, inputs.tr);
    let accepted = rho >= inputs.tr.eta1;
    if accepted {
        debug_assert_eq!(theta_tilde, trial);
        global.theta = theta_tilde;
        global.loss = trial_loss;
        global.grad_norm = norm(&trial_grad);
        global.grad = trial_grad;
    }
    global.delta = inputs.tr.clamp_radius(delta_tilde);

    let out = trust_region::tr_step(
        global_obj,
        global,
        inputs.tr,
        StepOptions {
            order: inputs.order,
            radius_cap: None,
            curvature: inputs.curvature,
        },
    )?;

    Ok(SyncReport {
        epoch: 0,
        iteration: 0,
        delta_in: delta_k,
        rho,
        accepted,
        global_step_accepted: out.accepted,
        trial_step_norm: norm(&s_tilde),
        loss_before: loss_k,
        loss_after: global.loss,
        grad_norm: global.grad_norm,
        delta_out: global.delta,
        workers: reports,
        sync_count: SYNCS_PER_ITERATION,
        val_accuracy: None,
        wall_time: Duration::ZERO,
    })
}

/// Result of [`run`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub reports: Vec<SyncReport>,
    pub theta: Vec<f64>,
    /// `true` when deterministic mode met the gradient tolerance.
    pub converged: bool,
}

/// Derives an independent stream seed from a base seed and two counters.
pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rng.next_u64()
}

fn build_workers(subsets: Vec<Vec<usize>>, cfg: &AptsConfig) -> Vec<SubdomainWorker> {
    let n = subsets.len();
    subsets
        .into_iter()
        .enumerate()
        .map(|(i, ix)| SubdomainWorker::new(i, ix, &cfg.tr, n, cfg.memory))
        .collect()
}

/// Trains from `theta0`. `on_report` sees each iteration as it completes;
/// an error from it stops the run.
pub fn run(
    cfg: &AptsConfig,
    spec: &MlpSpec,
    train: &Dataset,
    validation: Option<&Dataset>,
    theta0: Vec<f64>,
    on_report: &mut dyn FnMut(&SyncReport) -> Result<()>,
) -> Result<Trace> {
    cfg.validate(train.len())?;
    if theta0.len() != spec.param_count() {
        return Err(Error::invalid(format!(
            "initial parameters have length {}, network has {}",
            theta0.len(),
            spec.param_count()
        )));
    }
    let threads = cfg.threads.unwrap_or(cfg.subdomains).min(cfg.subdomains);
    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::invalid(format!("cannot start worker threads: {e}")))?,
        )
    } else {
        None
    };
    let started = Instant::now();
    let mut reports = Vec::new();
    let mut iteration = 0;
    let mut finish = |mut report: SyncReport, epoch: usize, theta: &[f64], iteration: &mut usize| -> Result<()> {
        report.epoch = epoch;
        report.iteration = *iteration;
        *iteration += 1;
        report.val_accuracy = match validation {
            Some(v) => Some(model::accuracy(spec, theta, &Batch::all(v))?),
            None => None,
        };
        report.wall_time = started.elapsed();
        on_report(&report)?;
        reports.push(report);
        Ok(())
    };

    let mut converged = false;
    let theta = match cfg.mode {
        Mode::Deterministic => {
            let part = data::partition(train.len(), cfg.subdomains, cfg.overlap_fraction, cfg.seed)?;
            let mut workers = build_workers(part.subsets, cfg);
            let global_obj = DataObjective::new(spec, Batch::all(train));
            let mut global = TrState::new(&global_obj, theta0, cfg.delta0, SecantMemory::new(cfg.memory))?;
            let inputs = IterationInputs {
                spec,
                data: train,
                nu: cfg.nu,
                tr: &cfg.tr,
                order: cfg.model_order,
                curvature: None,
            };
            for epoch in 0..cfg.max_epochs {
                if global.grad_norm <= cfg.grad_tol {
                    converged = true;
                    break;
                }
                let report = apts_iteration(&inputs, &global_obj, &mut workers, &mut global, pool.as_ref())?;
                finish(report, epoch, &global.theta, &mut iteration)?;
            }
            converged |= global.grad_norm <= cfg.grad_tol;
            global.theta
        }
        Mode::Stochastic => {
            let mut theta = theta0;
            let mut delta = cfg.delta0;
            let mut global_mem = SecantMemory::new(cfg.memory);
            let overlap = data::overlap_count(cfg.overlap_fraction, cfg.minibatch_size);
            for epoch in 0..cfg.max_epochs {
                let stream_seed = derive_seed(cfg.seed, epoch as u64, u64::MAX);
                let batches = data::minibatch_stream(train.len(), cfg.minibatch_size, cfg.overlap_fraction, stream_seed)?;
                let count = batches.len();
                for (t, batch_ix) in batches.iter().enumerate() {
                    let part = data::partition_indices(
                        batch_ix,
                        cfg.subdomains,
                        cfg.overlap_fraction,
                        derive_seed(cfg.seed, epoch as u64, t as u64),
                    )?;
                    let mut workers = build_workers(part.subsets, cfg);
                    // secant pairs for the global model come from the block this
                    // minibatch shares with a neighbour, when there is one
                    let shared: &[usize] = if overlap == 0 || count == 1 {
                        &[]
                    } else if t + 1 < count {
                        &batch_ix[batch_ix.len() - overlap..]
                    } else {
                        &batch_ix[..overlap]
                    };
                    let curvature_obj = (!shared.is_empty()).then(|| DataObjective::new(spec, Batch::select(train, shared)));
                    if curvature_obj.is_none() && count > 1 {
                        global_mem.reset();
                    }
                    let global_obj = DataObjective::new(spec, Batch::select(train, batch_ix));
                    let mut global = TrState::new(&global_obj, theta, delta, global_mem)?;
                    let inputs = IterationInputs {
                        spec,
                        data: train,
                        nu: cfg.nu,
                        tr: &cfg.tr,
                        order: cfg.model_order,
                        curvature: curvature_obj.as_ref().map(|c| c as &dyn Objective),
                    };
                    let report = apts_iteration(&inputs, &global_obj, &mut workers, &mut global, pool.as_ref())?;
                    finish(report, epoch, &global.theta, &mut iteration)?;
                    theta = global.theta;
                    delta = global.delta;
                    global_mem = global.mem;
                }
            }
            theta
        }
    };
    Ok(Trace {
        reports,
        theta,
        converged,
    })
}
