//! Limited-memory SR1 Hessian approximations.
//!
//! The operator is kept in compact form
//!
//! ```text
//! B = γI + Ψ M⁻¹ Ψᵀ,   Ψ = Y − γS,   M = D + L + Lᵀ − γ SᵀS
//! ```
//!
//! where `SᵀY = L + D + U` (strictly lower, diagonal, strictly upper). This
//! is the matrix obtained by applying the stored pairs as sequential SR1
//! updates to `γI`, oldest first.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm, DenseMatrix};

pub const DEFAULT_MEMORY: usize = 5;

/// Acceptance constant `c` in `|sᵀ(y − Bs)| ≥ c·‖s‖·‖y − Bs‖`.
const SR1_SKIP: f64 = 1e-8;
const GAMMA_MIN: f64 = 1e-6;
const GAMMA_MAX: f64 = 1e6;
/// Smallest admissible `|λ|_min / |λ|_max` of the middle matrix `M`.
const MIDDLE_RCOND: f64 = 1e-12;

/// Compact-form factors of the current operator.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactFactors {
    /// Columns `yⱼ − γ·sⱼ`, oldest first.
    pub psi: Vec<Vec<f64>>,
    /// `D + L + Lᵀ − γ·SᵀS`.
    pub middle: DenseMatrix,
    pub middle_inv: DenseMatrix,
    pub gamma: f64,
}

impl CompactFactors {
    fn build(pairs: &VecDeque<(Vec<f64>, Vec<f64>)>, gamma: f64) -> Option<Self> {
        let k = pairs.len();
        let mut middle = DenseMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..=i {
                let (si, _) = &pairs[i];
                let (sj, yj) = &pairs[j];
                // lower triangle of SᵀY (incl. diagonal): s_iᵀ y_j for i ≥ j
                let v = dot(si, yj) - gamma * dot(si, sj);
                middle[(i, j)] = v;
                middle[(j, i)] = v;
            }
        }
        let eig = linalg::sym_eig(&middle).ok()?;
        let max = eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = eig.values.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if k > 0 && !(min > MIDDLE_RCOND * max && min > 0.0) {
            return None;
        }
        let mut middle_inv = DenseMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                middle_inv[(i, j)] = (0..k)
                    .map(|l| eig.vectors[(i, l)] * eig.vectors[(j, l)] / eig.values[l])
                    .sum();
            }
        }
        let psi = pairs
            .iter()
            .map(|(s, y)| y.iter().zip(s).map(|(yv, sv)| yv - gamma * sv).collect())
            .collect();
        Some(Self {
            psi,
            middle,
            middle_inv,
            gamma,
        })
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = linalg::scaled(self.gamma, v);
        if self.psi.is_empty() {
            return out;
        }
        let proj: Vec<f64> = self.psi.iter().map(|p| dot(p, v)).collect();
        let coeff = self.middle_inv.matvec(&proj);
        for (p, c) in self.psi.iter().zip(&coeff) {
            linalg::axpy(*c, p, &mut out);
        }
        out
    }
}

/// Ring buffer of the most recent accepted secant pairs.
#[derive(Debug, Clone)]
pub struct SecantMemory {
    capacity: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>)>,
    gamma: f64,
    factors: CompactFactors,
}

impl SecantMemory {
    pub fn new(capacity: usize) -> Self {
        Self::with_gamma(capacity, 1.0)
    }

    /// Empty memory with `B₀ = γI`.
    pub fn with_gamma(capacity: usize, gamma: f64) -> Self {
        assert!(gamma.is_finite() && gamma > 0.0, "gamma must be positive");
        let pairs = VecDeque::new();
        let factors = CompactFactors::build(&pairs, gamma).expect("empty factors");
        Self {
            capacity,
            pairs,
            gamma,
            factors,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Stored `(s, y)` pairs, oldest first.
    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.pairs.iter().map(|(s, y)| (s.as_slice(), y.as_slice()))
    }

    pub fn factors(&self) -> &CompactFactors {
        &self.factors
    }

    pub fn dim(&self) -> Option<usize> {
        self.pairs.front().map(|(s, _)| s.len())
    }

    /// `B·v` in `O(n·m)`.
    pub fn hessian_vec(&self, v: &[f64]) -> Vec<f64> {
        if let Some(n) = self.dim() {
            assert_eq!(v.len(), n, "vector length does not match memory");
        }
        self.factors.apply(v)
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.capacity);
    }

    /// Offers a secant pair; returns whether it was stored.
    ///
    /// The pair is skipped when `y − Bs` vanishes or is nearly orthogonal to
    /// `s`, and when it would leave the middle matrix singular. On
    /// acceptance `γ` moves to `yᵀy/sᵀy` (clamped) if `sᵀy > 0` and the
    /// rebuilt factors stay well posed under the new value.
    pub fn push_pair(&mut self, s: &[f64], y: &[f64]) -> Result<bool> {
        linalg::ensure_same_len(s, y, "push_pair")?;
        if let Some(n) = self.dim() {
            if s.len() != n {
                return Err(Error::invalid(format!(
                    "push_pair: pair length {} does not match memory length {n}",
                    s.len()
                )));
            }
        }
        linalg::ensure_finite(s, "push_pair s")?;
        linalg::ensure_finite(y, "push_pair y")?;
        let s_norm = norm(s);
        if s_norm == 0.0 {
            return Err(Error::invalid("push_pair: zero step"));
        }
        if self.capacity == 0 {
            return Ok(false);
        }

        let bs = self.hessian_vec(s);
        let r: Vec<f64> = y.iter().zip(&bs).map(|(a, b)| a - b).collect();
        let r_norm = norm(&r);
        let scale = norm(y) + self.gamma * s_norm;
        if r_norm <= 1e-12 * scale || dot(s, &r).abs() < SR1_SKIP * s_norm * r_norm {
            return Ok(false);
        }

        let mut pairs = self.pairs.clone();
        if pairs.len() == self.capacity {
            pairs.pop_front();
        }
        pairs.push_back((s.to_vec(), y.to_vec()));

        let sy = dot(s, y);
        let mut candidates = Vec::with_capacity(2);
        if sy > 0.0 {
            candidates.push((dot(y, y) / sy).clamp(GAMMA_MIN, GAMMA_MAX));
        }
        candidates.push(self.gamma);
        for gamma in candidates {
            if let Some(factors) = CompactFactors::build(&pairs, gamma) {
                self.pairs = pairs;
                self.gamma = gamma;
                self.factors = factors;
                return Ok(true);
            }
        }
        Ok(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense oracle: apply SR1 updates one by one to `γI`.
    fn dense_sr1(mem: &SecantMemory, n: usize) -> DenseMatrix {
        let mut b = DenseMatrix::identity(n);
        for i in 0..n {
            b[(i, i)] = mem.gamma();
        }
        for (s, y) in mem.pairs() {
            let bs = b.matvec(s);
            let r: Vec<f64> = y.iter().zip(&bs).map(|(a, c)| a - c).collect();
            let denom: f64 = r.iter().zip(s).map(|(a, c)| a * c).sum();
            for i in 0..n {
                for j in 0..n {
                    b[(i, j)] += r[i] * r[j] / denom;
                }
            }
        }
        b
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn e(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn secant_on_first_pair() {
        let mut mem = SecantMemory::new(5);
        let e1 = e(3, 0);
        let y = vec![2.0, 0.0, 0.0];
        assert!(mem.push_pair(&e1, &y).unwrap());
        let be1 = mem.hessian_vec(&e1);
        assert!(linalg::norm(&linalg::sub(&be1, &y)) < 1e-15);
        // off the update subspace the operator is still the identity
        assert_eq!(mem.hessian_vec(&e(3, 1)), e(3, 1));
    }

    #[test]
    fn skips_pair_already_satisfied() {
        let mut mem = SecantMemory::new(5);
        let s = vec![0.3, -1.0, 2.0];
        assert!(!mem.push_pair(&s, &s).unwrap());
        assert!(mem.is_empty());
    }

    #[test]
    fn rejects_bad_input() {
        let mut mem = SecantMemory::new(2);
        assert!(mem.push_pair(&[1.0, 0.0], &[1.0]).is_err());
        assert!(mem.push_pair(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(mem.push_pair(&[1.0, 0.0], &[2.0, 0.0]).unwrap());
        assert!(mem.push_pair(&[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn empty_memory_scales_identity() {
        let mem = SecantMemory::with_gamma(3, 2.0);
        assert_eq!(mem.hessian_vec(&[1.0, -3.0]), vec![2.0, -6.0]);
    }

    #[test]
    fn reset_restores_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mem = SecantMemory::new(4);
        for _ in 0..4 {
            mem.push_pair(&rand_vec(6, &mut rng), &rand_vec(6, &mut rng)).unwrap();
        }
        let snapshot: Vec<_> = mem.pairs().map(|(s, y)| (s.to_vec(), y.to_vec())).collect();
        let before = mem.factors().clone();
        mem.reset();
        assert_eq!(mem.len(), 0);
        assert_eq!(mem.gamma(), 1.0);
        let v = rand_vec(6, &mut rng);
        assert_eq!(mem.hessian_vec(&v), v);
        for (s, y) in &snapshot {
            mem.push_pair(s, y).unwrap();
        }
        assert_eq!(mem.factors(), &before);
    }

    #[test]
    fn matches_dense_oracle_after_three_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mem = SecantMemory::new(5);
        while mem.len() < 3 {
            mem.push_pair(&rand_vec(10, &mut rng), &rand_vec(10, &mut rng)).unwrap();
        }
        let dense = dense_sr1(&mem, 10);
        for _ in 0..5 {
            let v = rand_vec(10, &mut rng);
            let err = linalg::norm(&linalg::sub(&mem.hessian_vec(&v), &dense.matvec(&v)));
            assert!(err <= 1e-10 * (1.0 + linalg::norm(&v)), "{err}");
        }
    }

    #[test]
    fn operator_can_be_indefinite() {
        let mut mem = SecantMemory::new(3);
        assert!(mem.push_pair(&e(4, 0), &[-1.0, 0.0, 0.0, 0.0]).unwrap());
        let dense = dense_sr1(&mem, 4);
        let eig = linalg::sym_eig(&dense).unwrap();
        assert!(eig.values[0] < 0.0);
    }

    #[test]
    fn hereditary_on_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 8;
        let mut a = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let x = rng.gen_range(-1.0..1.0);
                a[(i, j)] = x;
                a[(j, i)] = x;
            }
        }
        let mut mem = SecantMemory::new(n);
        for _ in 0..n {
            let s = rand_vec(n, &mut rng);
            let y = a.matvec(&s);
            mem.push_pair(&s, &y).unwrap();
        }
        for (s, y) in mem.pairs() {
            let err = linalg::norm(&linalg::sub(&mem.hessian_vec(s), y));
            assert!(err <= 1e-8, "{err}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn most_recent_secant_and_symmetry(seed in any::<u64>(), n in 2usize..12, m in 1usize..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut mem = SecantMemory::new(m);
                for _ in 0..10 {
                    let s = rand_vec(n, &mut rng);
                    let y = rand_vec(n, &mut rng);
                    if mem.push_pair(&s, &y).unwrap() {
                        let err = linalg::norm(&linalg::sub(&mem.hessian_vec(&s), &y));
                        prop_assert!(err <= 1e-9 * (linalg::norm(&y) + 1.0));
                    }
                    prop_assert!(mem.len() <= m);
                }
                let u = rand_vec(n, &mut rng);
                let v = rand_vec(n, &mut rng);
                let lhs = dot(&u, &mem.hessian_vec(&v));
                let rhs = dot(&v, &mem.hessian_vec(&u));
                prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
            }
        }
    }
}
