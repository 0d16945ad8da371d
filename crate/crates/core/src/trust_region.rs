//! Trust-region iterations: the standard globalized step and the bounded
//! local loop run by each subdomain worker.

use crate::error::{Error, Result};
use crate::linalg::{self, norm};
use crate::lsr1::SecantMemory;
use crate::obs;

/// Relative slack used when deciding that a local run has used up its
/// displacement budget.
pub const BUDGET_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrParams {
    pub eta1: f64,
    pub eta2: f64,
    /// decrease factor
    pub alpha: f64,
    /// increase factor
    pub beta: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl Default for TrParams {
    fn default() -> Self {
        Self {
            eta1: 0.1,
            eta2: 0.75,
            alpha: 0.5,
            beta: 2.0,
            delta_min: 1e-4,
            delta_max: 2.0,
        }
    }
}

impl TrParams {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.eta1, self.eta2, self.alpha, self.beta, self.delta_min, self.delta_max]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::invalid("trust-region constants must be finite"));
        }
        if !(0.0 <= self.eta1 && self.eta1 < self.eta2 && self.eta2 < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 <= eta1 < eta2 < 1, got eta1 = {}, eta2 = {}",
                self.eta1, self.eta2
            )));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.beta > 1.0) {
            return Err(Error::invalid(format!("beta must exceed 1, got {}", self.beta)));
        }
        if !(0.0 < self.delta_min && self.delta_min <= self.delta_max) {
            return Err(Error::invalid(format!(
                "need 0 < delta_min <= delta_max, got {} and {}",
                self.delta_min, self.delta_max
            )));
        }
        Ok(())
    }

    /// Same acceptance constants with both radius bounds divided by `n`.
    pub fn with_bounds_divided(&self, n: usize) -> Self {
        let n = n as f64;
        Self {
            delta_min: self.delta_min / n,
            delta_max: self.delta_max / n,
            ..*self
        }
    }

    /// Three-branch radius rule.
    pub fn update_radius(&self, delta: f64, rho: f64) -> f64 {
        if rho > self.eta2 {
            (self.beta * delta).min(self.delta_max)
        } else if rho < self.eta1 {
            (self.alpha * delta).max(self.delta_min)
        } else {
            delta
        }
    }

    pub fn clamp_radius(&self, delta: f64) -> f64 {
        delta.clamp(self.delta_min, self.delta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelOrder {
    /// `B ≡ 0`; steps are scaled steepest descent.
    FirstOrder,
    #[default]
    SecondOrder,
}

/// A differentiable scalar function of the parameter vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(theta)?.0)
    }
}

/// Wraps a closure returning `(f, ∇f)`.
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F> FnObjective<F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        (self.f)(theta)
    }
}

fn evaluate(obj: &dyn Objective, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    if theta.len() != obj.dim() {
        return Err(Error::invalid(format!(
            "iterate has length {}, objective expects {}",
            theta.len(),
            obj.dim()
        )));
    }
    let (f, g) = obj.value_and_grad(theta)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite loss or gradient", theta));
    }
    Ok((f, g))
}

#[derive(Debug, Clone)]
pub struct TrState {
    pub theta: Vec<f64>,
    pub delta: f64,
    pub mem: SecantMemory,
    /// `f(theta)`
    pub loss: f64,
    /// `∇f(theta)`
    pub grad: Vec<f64>,
    pub grad_norm: f64,
}

impl TrState {
    pub fn new(obj: &dyn Objective, theta: Vec<f64>, delta: f64, mem: SecantMemory) -> Result<Self> {
        let (loss, grad) = evaluate(obj, &theta)?;
        Ok(Self::from_parts(theta, delta, mem, loss, grad))
    }

    /// Builds a state from an already evaluated `(f, ∇f)` at `theta`.
    pub fn from_parts(theta: Vec<f64>, delta: f64, mem: SecantMemory, loss: f64, grad: Vec<f64>) -> Self {
        let grad_norm = norm(&grad);
        Self {
            theta,
            delta,
            mem,
            loss,
            grad,
            grad_norm,
        }
    }
}

/// Per-call knobs of [`tr_step`].
#[derive(Clone, Copy, Default)]
pub struct StepOptions<'a> {
    pub order: ModelOrder,
    /// Upper bound on the radius used for this step only.
    pub radius_cap: Option<f64>,
    /// When set, secant `y` is a gradient difference of this function
    /// instead of the stepping objective.
    pub curvature: Option<&'a dyn Objective>,
}

impl<'a> StepOptions<'a> {
    pub fn new(order: ModelOrder) -> Self {
        Self {
            order,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub accepted: bool,
    /// Actual over predicted reduction; 0 when the model predicts nothing.
    pub rho: f64,
    pub predicted_reduction: f64,
    pub actual_reduction: f64,
    pub step_norm: f64,
    /// The gradient vanished, so no step was attempted.
    pub stationary: bool,
}

/// One trust-region iteration on `obj` from `state`.
pub fn tr_step(
    obj: &dyn Objective,
    state: &mut TrState,
    params: &TrParams,
    opts: StepOptions<'_>,
) -> Result<StepOutcome> {
    if state.grad_norm == 0.0 {
        return Ok(StepOutcome {
            accepted: false,
            rho: 0.0,
            predicted_reduction: 0.0,
            actual_reduction: 0.0,
            step_norm: 0.0,
            stationary: true,
        });
    }
    let radius = match opts.radius_cap {
        Some(cap) => state.delta.min(cap),
        None => state.delta,
    };
    let sol = match opts.order {
        ModelOrder::FirstOrder => obs::solve_first_order(&state.grad, radius)?,
        ModelOrder::SecondOrder => obs::solve(&state.grad, &state.mem, radius)?,
    };
    let trial = linalg::add(&state.theta, &sol.step);
    let (trial_loss, trial_grad) = evaluate(obj, &trial)?;
    let actual = state.loss - trial_loss;
    let predicted = sol.predicted_reduction;
    let rho = if predicted > 0.0 { actual / predicted } else { 0.0 };
    let accepted = rho >= params.eta1 && predicted > 0.0 && trial_loss <= state.loss;
    state.delta = params.clamp_radius(params.update_radius(radius, rho));

    if accepted {
        if opts.order == ModelOrder::SecondOrder {
            let y = match opts.curvature {
                Some(c) => {
                    let (_, g_new) = evaluate(c, &trial)?;
                    let (_, g_old) = evaluate(c, &state.theta)?;
                    linalg::sub(&g_new, &g_old)
                }
                None => linalg::sub(&trial_grad, &state.grad),
            };
            if norm(&sol.step) > 0.0 {
                state.mem.push_pair(&sol.step, &y)?;
            }
        }
        state.theta = trial;
        state.loss = trial_loss;
        state.grad_norm = norm(&trial_grad);
        state.grad = trial_grad;
    }
    Ok(StepOutcome {
        accepted,
        rho,
        predicted_reduction: predicted,
        actual_reduction: actual,
        step_norm: norm(&sol.step),
        stationary: false,
    })
}

#[derive(Debug, Clone)]
pub struct LocalRun {
    /// `θ_final − θ₀`
    pub step: Vec<f64>,
    /// `f(θ₀) − f(θ₀ + step)`
    pub local_decrease: f64,
    pub iters: usize,
    /// Radius the local solver started from.
    pub initial_radius: f64,
    /// `∇f(θ₀)` as seen by the local objective.
    pub initial_grad: Vec<f64>,
}

/// Up to `nu` trust-region steps from `theta0` whose cumulative
/// displacement stays within `budget`. Stops early once the budget is
/// used up. Secant pairs are added to `mem`, which the caller owns so it
/// can be kept or reset between calls.
pub fn local_train(
    obj: &dyn Objective,
    theta0: &[f64],
    budget: f64,
    params: &TrParams,
    nu: usize,
    order: ModelOrder,
    mem: &mut SecantMemory,
) -> Result<LocalRun> {
    let (loss, grad) = evaluate(obj, theta0)?;
    local_train_from(obj, theta0, loss, grad, budget, params, nu, order, mem)
}

/// [`local_train`] with `(f, ∇f)` at `theta0` already known.
#[allow(clippy::too_many_arguments)]
pub fn local_train_from(
    obj: &dyn Objective,
    theta0: &[f64],
    loss0: f64,
    grad0: Vec<f64>,
    budget: f64,
    params: &TrParams,
    nu: usize,
    order: ModelOrder,
    mem: &mut SecantMemory,
) -> Result<LocalRun> {
    if !(budget.is_finite() && budget > 0.0) {
        return Err(Error::invalid(format!("local budget must be positive, got {budget}")));
    }
    if nu == 0 {
        return Err(Error::invalid("local iteration cap must be at least 1"));
    }
    let initial_grad = grad0.clone();
    let owned = std::mem::replace(mem, SecantMemory::new(mem.capacity()));
    let mut state = TrState::from_parts(theta0.to_vec(), budget, owned, loss0, grad0);
    let mut iters = 0;
    let result = (|| -> Result<()> {
        for _ in 0..nu {
            iters += 1;
            let remaining = budget - norm(&linalg::sub(&state.theta, theta0));
            let out = tr_step(
                obj,
                &mut state,
                params,
                StepOptions {
                    order,
                    radius_cap: Some(remaining),
                    curvature: None,
                },
            )?;
            if out.stationary {
                break;
            }
            if norm(&linalg::sub(&state.theta, theta0)) >= (1.0 - BUDGET_SLACK) * budget {
                break;
            }
        }
        Ok(())
    })();
    *mem = state.mem;
    result?;
    Ok(LocalRun {
        step: linalg::sub(&state.theta, theta0),
        local_decrease: loss0 - state.loss,
        iters,
        initial_radius: budget,
        initial_grad,
    })
}
