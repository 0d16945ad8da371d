//! Fully connected feed-forward networks with hand-written backpropagation.
//!
//! Parameters live in one flat vector. Each layer occupies a weight block
//! stored row-major as `fan_in × fan_out`, followed by its `fan_out` biases,
//! in layer order. Forward and backward passes run over chunks of samples
//! as dense matrix products.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{CompensatedSum, DenseMatrix};

/// Rows processed per forward/backward block.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax cross-entropy against class indices.
    CrossEntropy,
    /// `½‖z − t‖²` against real-valued targets.
    Mse,
}

/// Supervision attached to each sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values { dim: usize, data: Vec<f64> },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values { dim, data } => {
                if *dim == 0 {
                    0
                } else {
                    data.len() / dim
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class(&self, i: usize) -> Option<usize> {
        match self {
            Targets::Classes(c) => Some(c[i]),
            Targets::Values { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
    loss: LossKind,
    l2: f64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, loss: LossKind) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("network needs at least input and output sizes"));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!(
                "layer sizes must be positive: {layer_sizes:?}"
            )));
        }
        Ok(Self {
            layer_sizes,
            activation,
            loss,
            l2: 0.0,
        })
    }

    /// Adds `½·l2·‖θ‖²` to the loss.
    pub fn with_l2(mut self, l2: f64) -> Result<Self> {
        if !(l2.is_finite() && l2 >= 0.0) {
            return Err(Error::invalid(format!("l2 must be finite and >= 0, got {l2}")));
        }
        self.l2 = l2;
        Ok(self)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn layout(&self) -> ParamLayout {
        let mut offset = 0;
        let layers = self
            .layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset..offset + fan_in * fan_out;
                let biases = weights.end..weights.end + fan_out;
                offset = biases.end;
                LayerSlot {
                    fan_in,
                    fan_out,
                    weights,
                    biases,
                }
            })
            .collect();
        ParamLayout {
            layers,
            total: offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub biases: Range<usize>,
}

/// Offsets of each layer's tensors inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub layers: Vec<LayerSlot>,
    pub total: usize,
}

impl ParamLayout {
    pub fn unflatten(&self, theta: &[f64]) -> Result<Vec<(DenseMatrix, Vec<f64>)>> {
        if theta.len() != self.total {
            return Err(Error::invalid(format!(
                "parameter vector has length {}, layout expects {}",
                theta.len(),
                self.total
            )));
        }
        self.layers
            .iter()
            .map(|l| {
                let w = DenseMatrix::from_row_major(
                    l.fan_in,
                    l.fan_out,
                    theta[l.weights.clone()].to_vec(),
                )?;
                Ok((w, theta[l.biases.clone()].to_vec()))
            })
            .collect()
    }

    pub fn flatten(&self, tensors: &[(DenseMatrix, Vec<f64>)]) -> Result<Vec<f64>> {
        if tensors.len() != self.layers.len() {
            return Err(Error::invalid("layer count does not match layout"));
        }
        let mut theta = Vec::with_capacity(self.total);
        for (slot, (w, b)) in self.layers.iter().zip(tensors) {
            if w.rows() != slot.fan_in || w.cols() != slot.fan_out || b.len() != slot.fan_out {
                return Err(Error::invalid("tensor shape does not match layout"));
            }
            theta.extend_from_slice(w.as_slice());
            theta.extend_from_slice(b);
        }
        Ok(theta)
    }
}

/// A view of some samples of a dataset, in the given order.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    data: &'a Dataset,
    indices: Option<&'a [usize]>,
}

impl<'a> Batch<'a> {
    pub fn all(data: &'a Dataset) -> Self {
        Self {
            data,
            indices: None,
        }
    }

    pub fn select(data: &'a Dataset, indices: &'a [usize]) -> Self {
        Self {
            data,
            indices: Some(indices),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.map_or(self.data.len(), <[usize]>::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.data
    }

    #[inline]
    fn sample(&self, k: usize) -> usize {
        self.indices.map_or(k, |ix| ix[k])
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Vec<f64> {
    let layout = spec.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0; layout.total];
    for l in &layout.layers {
        let limit = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
        for w in &mut theta[l.weights.clone()] {
            *w = rng.gen_range(-limit..limit);
        }
    }
    theta
}

/// Mean loss over the batch and its exact gradient.
pub fn loss_and_grad(spec: &MlpSpec, theta: &[f64], batch: &Batch<'_>) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; spec.param_count()];
    let loss = evaluate(spec, theta, batch, Some(&mut grad))?;
    Ok((loss, grad))
}

/// Mean loss over the batch (forward pass only).
pub fn loss(spec: &MlpSpec, theta: &[f64], batch: &Batch<'_>) -> Result<f64> {
    evaluate(spec, theta, batch, None)
}

/// Output-layer values for every sample, row-major `p × d_o`.
pub fn predict(spec: &MlpSpec, theta: &[f64], batch: &Batch<'_>) -> Result<Vec<f64>> {
    check_inputs(spec, theta, batch)?;
    let layout = spec.layout();
    let d_out = spec.output_dim();
    let mut out = Vec::with_capacity(batch.len() * d_out);
    let mut acts = Vec::new();
    for start in (0..batch.len()).step_by(CHUNK) {
        let rows = CHUNK.min(batch.len() - start);
        forward_chunk(spec, &layout, theta, batch, start, rows, &mut acts);
        out.extend_from_slice(acts.last().unwrap());
    }
    Ok(out)
}

/// Fraction of samples whose largest output (lowest index on ties) is the
/// target class.
pub fn accuracy(spec: &MlpSpec, theta: &[f64], batch: &Batch<'_>) -> Result<f64> {
    if spec.loss() != LossKind::CrossEntropy {
        return Err(Error::invalid("accuracy requires a classification network"));
    }
    let logits = predict(spec, theta, batch)?;
    let d_out = spec.output_dim();
    let targets = &batch.dataset().targets;
    let correct = logits
        .chunks(d_out)
        .enumerate()
        .filter(|(k, row)| targets.class(batch.sample(*k)) == Some(argmax(row)))
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

fn check_inputs(spec: &MlpSpec, theta: &[f64], batch: &Batch<'_>) -> Result<()> {
    if theta.len() != spec.param_count() {
        return Err(Error::invalid(format!(
            "parameter vector has length {}, network expects {}",
            theta.len(),
            spec.param_count()
        )));
    }
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let data = batch.dataset();
    if let Some(&bad) = batch.indices.and_then(|ix| ix.iter().find(|&&i| i >= data.len())) {
        return Err(Error::invalid(format!(
            "sample index {bad} out of range for {} samples",
            data.len()
        )));
    }
    if data.input_dim != spec.input_dim() {
        return Err(Error::invalid(format!(
            "inputs have dimension {}, network expects {}",
            data.input_dim,
            spec.input_dim()
        )));
    }
    match (&data.targets, spec.loss()) {
        (Targets::Classes(c), LossKind::CrossEntropy) => {
            let d_out = spec.output_dim();
            if let Some(bad) = c.iter().find(|&&k| k >= d_out) {
                return Err(Error::invalid(format!(
                    "class index {bad} out of range for {d_out} outputs"
                )));
            }
        }
        (Targets::Values { dim, .. }, LossKind::Mse) => {
            if *dim != spec.output_dim() {
                return Err(Error::invalid(format!(
                    "targets have dimension {dim}, network outputs {}",
                    spec.output_dim()
                )));
            }
        }
        _ => return Err(Error::invalid("target kind does not match loss")),
    }
    Ok(())
}

/// `c = a·b + beta·c` on row-major (or transposed, via strides) operands.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every operand slice covers the strided extent implied by its
    // shape; callers pass exactly-sized buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fills `acts` with the input block followed by each layer's output.
fn forward_chunk(
    spec: &MlpSpec,
    layout: &ParamLayout,
    theta: &[f64],
    batch: &Batch<'_>,
    start: usize,
    rows: usize,
    acts: &mut Vec<Vec<f64>>,
) {
    let data = batch.dataset();
    let d_in = data.input_dim;
    acts.resize_with(layout.layers.len() + 1, Vec::new);
    let x = &mut acts[0];
    x.clear();
    for k in start..start + rows {
        x.extend_from_slice(data.input(batch.sample(k)));
    }
    debug_assert_eq!(x.len(), rows * d_in);
    let last = layout.layers.len() - 1;
    for (l, slot) in layout.layers.iter().enumerate() {
        let (before, after) = acts.split_at_mut(l + 1);
        let a = &before[l];
        let z = &mut after[0];
        z.clear();
        z.resize(rows * slot.fan_out, 0.0);
        let bias = &theta[slot.biases.clone()];
        for row in z.chunks_mut(slot.fan_out) {
            row.copy_from_slice(bias);
        }
        gemm(
            rows,
            slot.fan_in,
            slot.fan_out,
            a,
            (slot.fan_in as isize, 1),
            &theta[slot.weights.clone()],
            (slot.fan_out as isize, 1),
            1.0,
            z,
        );
        if l != last {
            match spec.activation {
                Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
                Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
            }
        }
    }
}

fn evaluate(
    spec: &MlpSpec,
    theta: &[f64],
    batch: &Batch<'_>,
    mut grad: Option<&mut Vec<f64>>,
) -> Result<f64> {
    check_inputs(spec, theta, batch)?;
    let layout = spec.layout();
    let p = batch.len();
    let inv_p = 1.0 / p as f64;
    let d_out = spec.output_dim();
    let targets = &batch.dataset().targets;
    let mut total = CompensatedSum::new();
    let mut acts: Vec<Vec<f64>> = Vec::new();
    let mut delta = Vec::new();
    let mut delta_prev = Vec::new();

    for start in (0..p).step_by(CHUNK) {
        let rows = CHUNK.min(p - start);
        forward_chunk(spec, &layout, theta, batch, start, rows, &mut acts);
        let out = acts.last().unwrap();
        delta.clear();
        delta.resize(rows * d_out, 0.0);
        for (r, (z, dz)) in out.chunks(d_out).zip(delta.chunks_mut(d_out)).enumerate() {
            let sample = batch.sample(start + r);
            match targets {
                Targets::Classes(c) => {
                    let target = c[sample];
                    let zmax = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let mut denom = 0.0;
                    for (d, &v) in dz.iter_mut().zip(z) {
                        *d = (v - zmax).exp();
                        denom += *d;
                    }
                    total.add(denom.ln() + zmax - z[target]);
                    for d in dz.iter_mut() {
                        *d *= inv_p / denom;
                    }
                    dz[target] -= inv_p;
                }
                Targets::Values { dim, data } => {
                    let t = &data[sample * dim..(sample + 1) * dim];
                    let mut sq = 0.0;
                    for ((d, &v), &tv) in dz.iter_mut().zip(z).zip(t) {
                        let e = v - tv;
                        sq += e * e;
                        *d = e * inv_p;
                    }
                    total.add(0.5 * sq);
                }
            }
        }

        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        for (l, slot) in layout.layers.iter().enumerate().rev() {
            let a = &acts[l];
            // dW += Aᵀ·δ
            gemm(
                slot.fan_in,
                rows,
                slot.fan_out,
                a,
                (1, slot.fan_in as isize),
                &delta,
                (slot.fan_out as isize, 1),
                1.0,
                &mut g[slot.weights.clone()],
            );
            let gb = &mut g[slot.biases.clone()];
            for row in delta.chunks(slot.fan_out) {
                for (b, d) in gb.iter_mut().zip(row) {
                    *b += d;
                }
            }
            if l == 0 {
                break;
            }
            // δ_prev = (δ·Wᵀ) ⊙ σ'(A)
            delta_prev.clear();
            delta_prev.resize(rows * slot.fan_in, 0.0);
            gemm(
                rows,
                slot.fan_out,
                slot.fan_in,
                &delta,
                (slot.fan_out as isize, 1),
                &theta[slot.weights.clone()],
                (1, slot.fan_out as isize),
                0.0,
                &mut delta_prev,
            );
            match spec.activation {
                Activation::Relu => {
                    for (d, &act) in delta_prev.iter_mut().zip(a) {
                        if act <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                Activation::Tanh => {
                    for (d, &act) in delta_prev.iter_mut().zip(a) {
                        *d *= 1.0 - act * act;
                    }
                }
            }
            std::mem::swap(&mut delta, &mut delta_prev);
        }
    }

    let mut loss = total.value() * inv_p;
    if spec.l2 > 0.0 {
        loss += 0.5 * spec.l2 * crate::linalg::dot(theta, theta);
        if let Some(g) = grad {
            crate::linalg::axpy(spec.l2, theta, g);
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_dataset(p: usize, d: usize, classes: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (0..p * d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels = (0..p).map(|_| rng.gen_range(0..classes)).collect();
        Dataset::new(inputs, d, Targets::Classes(labels)).unwrap()
    }

    #[test]
    fn parameter_count() {
        let spec = MlpSpec::new(vec![784, 640, 10], Activation::Relu, LossKind::CrossEntropy).unwrap();
        assert_eq!(spec.param_count(), 508_810);
        assert_eq!(init_params(&spec, 1).len(), 508_810);
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu, LossKind::CrossEntropy).unwrap();
        let a = init_params(&spec, 0);
        let b = init_params(&spec, 0);
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        assert_eq!(&a[4..], &[0.0, 0.0]);
        let limit = (6.0f64 / 4.0).sqrt();
        assert!(a[..4].iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(MlpSpec::new(vec![3], Activation::Relu, LossKind::Mse).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], Activation::Relu, LossKind::Mse).is_err());
    }

    #[test]
    fn zero_params_give_log_classes() {
        let spec = MlpSpec::new(vec![5, 7, 10], Activation::Tanh, LossKind::CrossEntropy).unwrap();
        let ds = random_dataset(13, 5, 10, 2);
        let theta = vec![0.0; spec.param_count()];
        let (l, _) = loss_and_grad(&spec, &theta, &Batch::all(&ds)).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn duplicated_batch_has_same_mean() {
        let spec = MlpSpec::new(vec![4, 6, 3], Activation::Relu, LossKind::CrossEntropy).unwrap();
        let ds = random_dataset(9, 4, 3, 5);
        let theta = init_params(&spec, 9);
        let once: Vec<usize> = (0..9).collect();
        let twice: Vec<usize> = (0..9).chain(0..9).collect();
        let (l1, g1) = loss_and_grad(&spec, &theta, &Batch::select(&ds, &once)).unwrap();
        let (l2, g2) = loss_and_grad(&spec, &theta, &Batch::select(&ds, &twice)).unwrap();
        assert!((l1 - l2).abs() <= 1e-15 * l1.abs());
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let spec = MlpSpec::new(vec![4, 8, 3], Activation::Tanh, LossKind::CrossEntropy).unwrap();
        let ds = random_dataset(5, 4, 3, 17);
        let batch = Batch::all(&ds);
        let theta = init_params(&spec, 4);
        let (_, g) = loss_and_grad(&spec, &theta, &batch).unwrap();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (loss(&spec, &tp, &batch).unwrap() - loss(&spec, &tm, &batch).unwrap()) / (2.0 * h);
            let err = (fd - g[i]).abs() / (1e-6f64).max(g[i].abs().max(fd.abs()));
            assert!(err <= 1e-6 || (fd - g[i]).abs() <= 1e-10, "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn mse_gradient_and_l2() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Tanh, LossKind::Mse)
            .unwrap()
            .with_l2(0.1)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = (0..18).map(|_| rng.gen_range(0.0..1.0)).collect();
        let targets = Targets::Values {
            dim: 2,
            data: (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let ds = Dataset::new(inputs, 3, targets).unwrap();
        let batch = Batch::all(&ds);
        let theta = init_params(&spec, 1);
        let (_, g) = loss_and_grad(&spec, &theta, &batch).unwrap();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (loss(&spec, &tp, &batch).unwrap() - loss(&spec, &tm, &batch).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-8 * (1.0 + g[i].abs()), "coord {i}");
        }
    }

    #[test]
    fn layout_round_trip() {
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::Relu, LossKind::CrossEntropy).unwrap();
        let theta = init_params(&spec, 3);
        let layout = spec.layout();
        let tensors = layout.unflatten(&theta).unwrap();
        assert_eq!(tensors[0].0.rows(), 3);
        assert_eq!(tensors[1].1.len(), 2);
        assert_eq!(layout.flatten(&tensors).unwrap(), theta);
        assert!(layout.unflatten(&theta[1..]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let spec = MlpSpec::new(vec![4, 3], Activation::Relu, LossKind::CrossEntropy).unwrap();
        let ds = random_dataset(3, 4, 3, 0);
        let err = loss_and_grad(&spec, &[0.0; 5], &Batch::all(&ds));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let bad = Dataset::new(vec![0.0; 8], 4, Targets::Classes(vec![0, 5])).unwrap();
        let theta = vec![0.0; spec.param_count()];
        assert!(loss(&spec, &theta, &Batch::all(&bad)).is_err());
    }

    #[test]
    fn accuracy_extremes() {
        // single layer [2, 3]: weights zero, bias (1, 0, 0) -> always class 0
        let spec = MlpSpec::new(vec![2, 3], Activation::Relu, LossKind::CrossEntropy).unwrap();
        let mut theta = vec![0.0; spec.param_count()];
        theta[6] = 1.0;
        let zeros = Dataset::new(vec![0.5; 8], 2, Targets::Classes(vec![0; 4])).unwrap();
        assert_eq!(accuracy(&spec, &theta, &Batch::all(&zeros)).unwrap(), 1.0);
        let ones = Dataset::new(vec![0.5; 8], 2, Targets::Classes(vec![1; 4])).unwrap();
        assert_eq!(accuracy(&spec, &theta, &Batch::all(&ones)).unwrap(), 0.0);
        // ties resolve to the lowest index
        let tied = vec![0.0; spec.param_count()];
        assert_eq!(accuracy(&spec, &tied, &Batch::all(&zeros)).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_matches_recount() {
        let spec = MlpSpec::new(vec![6, 9, 10], Activation::Relu, LossKind::CrossEntropy).unwrap();
        let ds = random_dataset(200, 6, 10, 21);
        let theta = init_params(&spec, 21);
        let acc = accuracy(&spec, &theta, &Batch::all(&ds)).unwrap();
        // independent per-sample forward pass with explicit loops
        let tensors = spec.layout().unflatten(&theta).unwrap();
        let mut correct = 0;
        for i in 0..ds.len() {
            let mut a = ds.input(i).to_vec();
            for (l, (w, b)) in tensors.iter().enumerate() {
                let mut z = b.clone();
                for (r, &ar) in a.iter().enumerate() {
                    for c in 0..w.cols() {
                        z[c] += ar * w[(r, c)];
                    }
                }
                if l + 1 < tensors.len() {
                    z.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                a = z;
            }
            let mut best = 0;
            for c in 1..a.len() {
                if a[c] > a[best] {
                    best = c;
                }
            }
            if Some(best) == ds.targets.class(i) {
                correct += 1;
            }
        }
        assert_eq!(acc, correct as f64 / 200.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;
        use rand::seq::SliceRandom;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(50))]

            #[test]
            fn backprop_matches_finite_differences(
                hidden in prop::collection::vec(1usize..8, 0..3),
                d_in in 1usize..6,
                classes in 2usize..5,
                seed in any::<u64>(),
            ) {
                let mut sizes = vec![d_in];
                sizes.extend(hidden);
                sizes.push(classes);
                let spec = MlpSpec::new(sizes, Activation::Tanh, LossKind::CrossEntropy).unwrap();
                prop_assume!(spec.param_count() <= 500);
                let ds = random_dataset(6, d_in, classes, seed);
                let batch = Batch::all(&ds);
                let mut theta = init_params(&spec, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                for l in spec.layout().layers {
                    for b in &mut theta[l.biases] {
                        *b = rng.gen_range(-0.5..0.5);
                    }
                }
                let (_, g) = loss_and_grad(&spec, &theta, &batch).unwrap();
                let h = 1e-5;
                let gmax = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                for i in 0..theta.len() {
                    let mut tp = theta.clone();
                    let mut tm = theta.clone();
                    tp[i] += h;
                    tm[i] -= h;
                    let fd = (loss(&spec, &tp, &batch).unwrap()
                        - loss(&spec, &tm, &batch).unwrap()) / (2.0 * h);
                    // relative to the coordinate, floored at the gradient scale
                    let scale = g[i].abs().max(1e-3 * gmax).max(1e-8);
                    prop_assert!((fd - g[i]).abs() <= 1e-6 * scale, "coord {}: {} vs {}", i, fd, g[i]);
                }
            }

            #[test]
            fn loss_is_order_invariant(seed in any::<u64>()) {
                let spec = MlpSpec::new(vec![3, 5, 4], Activation::Relu, LossKind::CrossEntropy).unwrap();
                let ds = random_dataset(40, 3, 4, seed);
                let theta = init_params(&spec, seed);
                let mut idx: Vec<usize> = (0..40).collect();
                let base = loss(&spec, &theta, &Batch::select(&ds, &idx)).unwrap();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let shuffled = loss(&spec, &theta, &Batch::select(&ds, &idx)).unwrap();
                prop_assert!((base - shuffled).abs() <= 1e-12 * base.abs());
            }
        }
    }
}
