//! Exact trust-region subproblem solves for L-SR1 operators.
//!
//! Minimizes `m(s) = gᵀs + ½ sᵀBs` over `‖s‖ ≤ Δ` where `B = γI + ΨM⁻¹Ψᵀ`.
//! A thin QR of `Ψ` and an eigendecomposition of the small matrix
//! `R M⁻¹ Rᵀ` give the spectrum of `B` on `range(Ψ)`; on the orthogonal
//! complement `B` acts as `γI`. The optimality conditions
//!
//! ```text
//! (B + σI) s = −g,   B + σI ⪰ 0,   σ ≥ 0,   σ (Δ − ‖s‖) = 0
//! ```
//!
//! then reduce to a scalar secular equation in `σ`, solved by safeguarded
//! Newton iteration on `1/‖s(σ)‖ − 1/Δ`.

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm, DenseMatrix};
use crate::lsr1::SecantMemory;

const SECULAR_TOL: f64 = 1e-10;
const SECULAR_MAX_ITERS: usize = 100;
/// Columns of `Ψ` whose residual after orthogonalization falls below this
/// fraction of their norm are treated as linearly dependent.
const RANK_TOL: f64 = 1e-10;
/// Relative size below which a gradient component counts as zero when
/// testing for the hard case.
const HARD_CASE_TOL: f64 = 1e-10;

/// Size limit for [`solve_dense_oracle`].
pub const DENSE_ORACLE_MAX_DIM: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSolution {
    pub step: Vec<f64>,
    /// `−(gᵀs + ½ sᵀBs)`
    pub predicted_reduction: f64,
    pub on_boundary: bool,
    /// Lagrange multiplier of the norm constraint.
    pub sigma: f64,
}

impl SubproblemSolution {
    fn zero(n: usize) -> Self {
        Self {
            step: vec![0.0; n],
            predicted_reduction: 0.0,
            on_boundary: false,
            sigma: 0.0,
        }
    }
}

fn check_radius(delta: f64) -> Result<()> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::invalid(format!("trust-region radius must be positive, got {delta}")));
    }
    Ok(())
}

/// `m(s)` evaluated through the memory's Hessian-vector product.
pub fn model_value(g: &[f64], mem: &SecantMemory, s: &[f64]) -> f64 {
    dot(g, s) + 0.5 * dot(s, &mem.hessian_vec(s))
}

/// First-order model (`B ≡ 0`): the minimizer is `−Δ·g/‖g‖`.
pub fn solve_first_order(g: &[f64], delta: f64) -> Result<SubproblemSolution> {
    check_radius(delta)?;
    linalg::ensure_finite(g, "gradient")?;
    let g_norm = norm(g);
    if g_norm == 0.0 {
        return Ok(SubproblemSolution::zero(g.len()));
    }
    Ok(SubproblemSolution {
        step: linalg::scaled(-delta / g_norm, g),
        predicted_reduction: delta * g_norm,
        on_boundary: true,
        sigma: g_norm / delta,
    })
}

/// One eigen-direction of `B` seen by the secular equation: eigenvalue and
/// squared gradient component.
#[derive(Debug, Clone, Copy)]
struct Mode {
    lambda: f64,
    weight: f64,
}

/// `(‖s(σ)‖, Σ c²/(λ+σ)³)` over modes with nonzero weight.
fn secular_terms(modes: &[Mode], sigma: f64) -> (f64, f64) {
    let mut sq = 0.0;
    let mut cube = 0.0;
    for m in modes {
        if m.weight == 0.0 {
            continue;
        }
        let d = m.lambda + sigma;
        sq += m.weight / (d * d);
        cube += m.weight / (d * d * d);
    }
    (sq.sqrt(), cube)
}

/// Finds `σ ∈ (lo, ∞)` with `‖s(σ)‖ = Δ`; `‖s(σ)‖` is strictly decreasing
/// there. Falls back to the feasible end of the bracket if the tolerance is
/// not met in time.
fn secular_root(modes: &[Mode], delta: f64, lo: f64, g_norm: f64, lambda_min: f64) -> f64 {
    let mut lo = lo;
    let mut hi = (g_norm / delta - lambda_min).max(lo);
    while secular_terms(modes, hi).0 > delta {
        hi = 2.0 * hi + f64::MIN_POSITIVE;
    }
    let mut sigma = lo;
    for _ in 0..SECULAR_MAX_ITERS {
        let (len, cube) = secular_terms(modes, sigma);
        let next = if len.is_finite() {
            if (len - delta).abs() <= SECULAR_TOL * delta {
                return sigma;
            }
            if len > delta {
                lo = sigma;
            } else {
                hi = sigma;
            }
            let phi = 1.0 / len - 1.0 / delta;
            sigma - phi * len * len * len / cube
        } else {
            // on a pole
            lo = sigma;
            f64::NAN
        };
        if hi - lo <= f64::EPSILON * hi.abs() {
            break;
        }
        sigma = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
    }
    hi
}

/// Thin QR of the columns by twice-applied modified Gram–Schmidt. Returns
/// the orthonormal columns and `R` (`rank × k`) with `columns ≈ Q·R`.
fn thin_qr(columns: &[Vec<f64>]) -> (Vec<Vec<f64>>, DenseMatrix) {
    let k = columns.len();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut residuals = Vec::with_capacity(k);
    for (j, col) in columns.iter().enumerate() {
        let mut v = col.clone();
        let mut c = vec![0.0; q.len()];
        for _ in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let proj = dot(qi, &v);
                c[i] += proj;
                linalg::axpy(-proj, qi, &mut v);
            }
        }
        let rn = norm(&v);
        let cn = norm(col);
        coeffs.push(c);
        residuals.push((j, rn));
        if rn > RANK_TOL * cn && rn > 0.0 {
            v.iter_mut().for_each(|x| *x /= rn);
            q.push(v);
            let last = coeffs.len() - 1;
            coeffs[last].push(rn);
        }
    }
    let r_rank = q.len();
    let mut r = DenseMatrix::zeros(r_rank, k);
    for (j, c) in coeffs.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            r[(i, j)] = v;
        }
    }
    (q, r)
}

/// Global minimizer of the L-SR1 trust-region model.
pub fn solve(g: &[f64], mem: &SecantMemory, delta: f64) -> Result<SubproblemSolution> {
    check_radius(delta)?;
    linalg::ensure_finite(g, "gradient")?;
    let n = g.len();
    if let Some(dim) = mem.dim() {
        if dim != n {
            return Err(Error::invalid(format!(
                "gradient has length {n}, secant memory has length {dim}"
            )));
        }
    }
    let g_norm = norm(g);
    if g_norm == 0.0 {
        return Ok(SubproblemSolution::zero(n));
    }

    let factors = mem.factors();
    let gamma = factors.gamma;
    let (q, r) = thin_qr(&factors.psi);
    let rank = q.len();

    // Spectrum on range(Ψ): eig(R M⁻¹ Rᵀ) + γ.
    let (hat_values, u) = if rank > 0 {
        let t = r.matmul(&factors.middle_inv).matmul(&r.transpose());
        let mut t_sym = t.clone();
        for i in 0..rank {
            for j in 0..rank {
                t_sym[(i, j)] = 0.5 * (t[(i, j)] + t[(j, i)]);
            }
        }
        let eig = linalg::sym_eig(&t_sym)?;
        (eig.values, eig.vectors)
    } else {
        (Vec::new(), DenseMatrix::zeros(0, 0))
    };

    // P∥ = Q·U, stored column-wise.
    let p_par: Vec<Vec<f64>> = (0..rank)
        .map(|c| {
            let mut col = vec![0.0; n];
            for (i, qi) in q.iter().enumerate() {
                linalg::axpy(u[(i, c)], qi, &mut col);
            }
            col
        })
        .collect();
    let g_par: Vec<f64> = p_par.iter().map(|p| dot(p, g)).collect();
    let mut g_perp = g.to_vec();
    for (p, &c) in p_par.iter().zip(&g_par) {
        linalg::axpy(-c, p, &mut g_perp);
    }
    let has_complement = rank < n;
    let g_perp_sq = if has_complement { dot(&g_perp, &g_perp) } else { 0.0 };

    let mut modes: Vec<Mode> = hat_values
        .iter()
        .zip(&g_par)
        .map(|(&h, &c)| Mode {
            lambda: h + gamma,
            weight: c * c,
        })
        .collect();
    if has_complement {
        modes.push(Mode {
            lambda: gamma,
            weight: g_perp_sq,
        });
    }
    let lambda_min = modes.iter().fold(f64::INFINITY, |m, md| m.min(md.lambda));
    let lambda_scale = modes.iter().fold(0.0f64, |m, md| m.max(md.lambda.abs())).max(1.0);

    let mut sigma = 0.0;
    let mut hard_tail: Option<(usize, f64)> = None;

    let interior = lambda_min > 0.0 && secular_terms(&modes, 0.0).0 <= delta;
    if !interior {
        let lo = (-lambda_min).max(0.0);
        let near_min = |m: &Mode| (m.lambda - lambda_min).abs() <= 1e-12 * lambda_scale;
        let degenerate = lambda_min <= 0.0
            && modes
                .iter()
                .filter(|m| near_min(m))
                .all(|m| m.weight.sqrt() <= HARD_CASE_TOL * g_norm);
        let mut hard = false;
        if degenerate {
            let reduced: Vec<Mode> = modes
                .iter()
                .map(|m| if near_min(m) { Mode { weight: 0.0, ..*m } } else { *m })
                .collect();
            let len = secular_terms(&reduced, lo).0;
            if len <= delta {
                // The pseudo-inverse step stays inside; move along an
                // eigenvector of λ_min up to the boundary.
                hard = true;
                sigma = lo;
                let idx = (0..rank)
                    .find(|&i| near_min(&modes[i]))
                    .expect("λ_min ≤ 0 lies in range(Ψ) because γ > 0");
                let tau = (delta * delta - len * len).max(0.0).sqrt();
                hard_tail = Some((idx, tau));
                modes = reduced;
            }
        }
        if !hard {
            sigma = secular_root(&modes, delta, lo, g_norm, lambda_min);
        }
    }

    // Assemble s = P∥ a − g⊥/(γ+σ) and its model value in eigen-coordinates.
    let mut step = vec![0.0; n];
    let mut model = 0.0;
    for i in 0..rank {
        let lam = modes[i].lambda;
        let a = match hard_tail {
            Some((idx, tau)) if idx == i => tau,
            _ if modes[i].weight == 0.0 => 0.0,
            _ => -g_par[i] / (lam + sigma),
        };
        model += g_par[i] * a + 0.5 * lam * a * a;
        linalg::axpy(a, &p_par[i], &mut step);
    }
    if has_complement && g_perp_sq > 0.0 {
        let c = -1.0 / (gamma + sigma);
        model += c * g_perp_sq + 0.5 * gamma * c * c * g_perp_sq;
        linalg::axpy(c, &g_perp, &mut step);
    }
    let len = norm(&step);
    if len > delta {
        step.iter_mut().for_each(|x| *x *= delta / len);
    }
    Ok(SubproblemSolution {
        step,
        predicted_reduction: (-model).max(0.0),
        on_boundary: sigma > 0.0 || hard_tail.is_some(),
        sigma,
    })
}

/// Reference solve through a full eigendecomposition of a dense `B`, with
/// the secular equation bracketed and bisected to machine precision.
pub fn solve_dense_oracle(g: &[f64], b: &DenseMatrix, delta: f64) -> Result<SubproblemSolution> {
    check_radius(delta)?;
    let n = g.len();
    if n > DENSE_ORACLE_MAX_DIM {
        return Err(Error::invalid(format!(
            "dense oracle limited to n <= {DENSE_ORACLE_MAX_DIM}, got {n}"
        )));
    }
    if b.rows() != n || b.cols() != n {
        return Err(Error::invalid("dense oracle: matrix and gradient sizes differ"));
    }
    linalg::ensure_finite(g, "gradient")?;
    let eig = linalg::sym_eig(b)?;
    let comps: Vec<f64> = (0..n).map(|i| dot(&eig.vectors.column(i), g)).collect();
    let lam_min = eig.values[0];
    let g_norm = norm(g);
    let step_len = |sigma: f64, skip: &dyn Fn(usize) -> bool| -> f64 {
        (0..n)
            .filter(|&i| !skip(i))
            .map(|i| {
                let d = eig.values[i] + sigma;
                comps[i] * comps[i] / (d * d)
            })
            .sum::<f64>()
            .sqrt()
    };
    let assemble = |sigma: f64, skip: &dyn Fn(usize) -> bool| -> Vec<f64> {
        let mut s = vec![0.0; n];
        for i in 0..n {
            if skip(i) {
                continue;
            }
            let coef = -comps[i] / (eig.values[i] + sigma);
            linalg::axpy(coef, &eig.vectors.column(i), &mut s);
        }
        s
    };
    let finish = |s: Vec<f64>, sigma: f64, on_boundary: bool| -> SubproblemSolution {
        let m = dot(g, &s) + 0.5 * dot(&s, &b.matvec(&s));
        SubproblemSolution {
            step: s,
            predicted_reduction: -m,
            on_boundary,
            sigma,
        }
    };
    let none = |_: usize| false;

    if g_norm == 0.0 && lam_min >= 0.0 {
        return Ok(SubproblemSolution::zero(n));
    }
    if lam_min > 0.0 && step_len(0.0, &none) <= delta {
        return Ok(finish(assemble(0.0, &none), 0.0, false));
    }
    let scale = eig.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let in_min = |i: usize| (eig.values[i] - lam_min).abs() <= 1e-12 * scale;
    let lo = (-lam_min).max(0.0);
    let min_comp = (0..n)
        .filter(|&i| in_min(i))
        .fold(0.0f64, |m, i| m.max(comps[i].abs()));
    if lam_min <= 0.0 && min_comp <= HARD_CASE_TOL * g_norm.max(f64::MIN_POSITIVE) {
        let len = step_len(lo, &in_min);
        if len <= delta {
            let mut s = assemble(lo, &in_min);
            let tau = (delta * delta - len * len).max(0.0).sqrt();
            linalg::axpy(tau, &eig.vectors.column(0), &mut s);
            return Ok(finish(s, lo, true));
        }
    }
    // bisection on ‖s(σ)‖ = Δ
    let (mut a, mut z) = (lo, lo + g_norm / delta + scale);
    while step_len(z, &none) > delta {
        z *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (a + z);
        if mid <= a || mid >= z {
            break;
        }
        let len = step_len(mid, &none);
        if len.is_finite() && len <= delta {
            z = mid;
        } else {
            a = mid;
        }
    }
    Ok(finish(assemble(z, &none), z, true))
}
