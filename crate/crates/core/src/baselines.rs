//! First-order reference optimizers.

use crate::error::{Error, Result};
use crate::linalg;

fn check_lr(lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}

/// `θ − lr·g`
pub fn sgd_step(theta: &[f64], grad: &[f64], lr: f64) -> Result<Vec<f64>> {
    check_lr(lr)?;
    linalg::ensure_same_len(theta, grad, "sgd step")?;
    Ok(theta.iter().zip(grad).map(|(t, g)| t - lr * g).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        check_lr(self.lr)?;
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("Adam decay rates must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update; advances `state` in place.
pub fn adam_step(state: &mut AdamState, theta: &[f64], grad: &[f64], p: &AdamParams) -> Result<Vec<f64>> {
    p.validate()?;
    linalg::ensure_same_len(theta, grad, "adam step")?;
    linalg::ensure_same_len(theta, &state.m, "adam state")?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - p.beta1.powi(t);
    let c2 = 1.0 - p.beta2.powi(t);
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = p.beta1 * state.m[i] + (1.0 - p.beta1) * g;
        state.v[i] = p.beta2 * state.v[i] + (1.0 - p.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        out.push(theta[i] - p.lr * m_hat / (v_hat.sqrt() + p.eps));
    }
    Ok(out)
}
