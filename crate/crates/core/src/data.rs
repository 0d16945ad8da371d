//! Datasets, IDX (MNIST) files, synthetic blobs, and index partitions.
//!
//! Partitions and minibatches are index lists into one immutable dataset, so
//! any number of workers can share the samples without copying them.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, IdxError, Result};
use crate::model::Targets;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples stored row-major, `len() × input_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, input_dim: usize, targets: Targets) -> Result<Self> {
        if input_dim == 0 || inputs.len() % input_dim != 0 {
            return Err(Error::invalid(format!(
                "{} input values do not form rows of width {input_dim}",
                inputs.len()
            )));
        }
        let p = inputs.len() / input_dim;
        if p == 0 {
            return Err(Error::invalid("dataset has no samples"));
        }
        if targets.len() != p {
            return Err(Error::invalid(format!(
                "{p} inputs but {} targets",
                targets.len()
            )));
        }
        Ok(Self {
            inputs,
            input_dim,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    #[inline]
    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Copies the selected samples into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
        }
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Values { dim, data } => Targets::Values {
                dim: *dim,
                data: indices
                    .iter()
                    .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
            },
        };
        Dataset::new(inputs, self.input_dim, targets)
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        if let Targets::Classes(c) = &self.targets {
            for &k in c {
                counts[k] += 1;
            }
        }
        counts
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

struct IdxImages {
    count: usize,
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
}

fn parse_images(bytes: &[u8]) -> std::result::Result<IdxImages, IdxError> {
    let magic = read_u32(bytes, 0).ok_or(IdxError::TruncatedHeader)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4).ok_or(IdxError::TruncatedHeader)? as usize;
    let rows = read_u32(bytes, 8).ok_or(IdxError::TruncatedHeader)? as usize;
    let cols = read_u32(bytes, 12).ok_or(IdxError::TruncatedHeader)? as usize;
    for (name, v) in [("count", count), ("rows", rows), ("cols", cols)] {
        if v == 0 {
            return Err(IdxError::EmptyDimension(name));
        }
    }
    let expected = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(IdxError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload[..expected].to_vec(),
    })
}

fn parse_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, IdxError> {
    let magic = read_u32(bytes, 0).ok_or(IdxError::TruncatedHeader)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4).ok_or(IdxError::TruncatedHeader)? as usize;
    if count == 0 {
        return Err(IdxError::EmptyDimension("count"));
    }
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(IdxError::TruncatedPayload {
            expected: count,
            found: payload.len(),
        });
    }
    Ok(payload[..count].to_vec())
}

/// Loads an IDX image/label pair. Pixels are scaled by `1/255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = parse_images(&fs::read(images_path)?).map_err(|kind| Error::Idx {
        path: images_path.to_path_buf(),
        kind,
    })?;
    let labels = parse_labels(&fs::read(labels_path)?).map_err(|kind| Error::Idx {
        path: labels_path.to_path_buf(),
        kind,
    })?;
    if images.count != labels.len() {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            kind: IdxError::CountMismatch {
                images: images.count,
                labels: labels.len(),
            },
        });
    }
    let inputs = images.pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let targets = Targets::Classes(labels.iter().map(|&l| usize::from(l)).collect());
    Dataset::new(inputs, images.rows * images.cols, targets)
}

pub fn write_idx_images(
    path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    pixels: &[u8],
) -> Result<()> {
    if rows == 0 || cols == 0 || pixels.len() % (rows * cols) != 0 {
        return Err(Error::invalid("pixel buffer does not hold whole images"));
    }
    let count = pixels.len() / (rows * cols);
    let mut f = fs::File::create(path)?;
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    f.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

/// Minimum distance between blob centres, in units of the blob deviation.
const BLOB_SEPARATION: f64 = 6.0;

/// Gaussian blobs with unit deviation, one per class, min-max scaled to
/// `[0, 1]` per feature. Labels cycle through the classes before shuffling,
/// so class counts differ by at most one.
pub fn synth_classification(
    n_samples: usize,
    input_dim: usize,
    classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || n_samples < classes || input_dim == 0 {
        return Err(Error::invalid(format!(
            "need n_samples >= classes >= 2 and input_dim >= 1 (got {n_samples}, {classes}, {input_dim})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut radius = BLOB_SEPARATION;
    let centres = loop {
        let centres: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                let dir: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
                let len = crate::linalg::norm(&dir).max(1e-12);
                dir.iter().map(|x| x * radius / len).collect()
            })
            .collect();
        let min_sep = (0..classes)
            .flat_map(|i| ((i + 1)..classes).map(move |j| (i, j)))
            .map(|(i, j)| crate::linalg::norm(&crate::linalg::sub(&centres[i], &centres[j])))
            .fold(f64::INFINITY, f64::min);
        if min_sep >= BLOB_SEPARATION {
            break centres;
        }
        radius *= 1.1;
    };

    let mut labels: Vec<usize> = (0..n_samples).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut inputs = Vec::with_capacity(n_samples * input_dim);
    for &c in &labels {
        for &mu in &centres[c] {
            let z: f64 = rng.sample(StandardNormal);
            inputs.push(mu + z);
        }
    }
    for j in 0..input_dim {
        let column = inputs.iter().skip(j).step_by(input_dim);
        let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
        let span = if hi > lo { hi - lo } else { 1.0 };
        for x in inputs.iter_mut().skip(j).step_by(input_dim) {
            *x = (*x - lo) / span;
        }
    }
    Dataset::new(inputs, input_dim, Targets::Classes(labels))
}

/// File names of the four standard MNIST IDX files, training pair first.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Writes small 28×28, ten-class IDX files under the MNIST names, drawn
/// from [`synth_classification`] and quantized to bytes.
pub fn write_fixtures(dir: impl AsRef<Path>, train: usize, test: usize, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let ds = synth_classification(train + test, 28 * 28, 10, seed)?;
    let pixels: Vec<u8> = ds.inputs.iter().map(|&x| (x * 255.0).round() as u8).collect();
    let labels: Vec<u8> = (0..ds.len()).map(|i| ds.targets.class(i).unwrap_or(0) as u8).collect();
    let cut = train * 28 * 28;
    write_idx_images(dir.join(MNIST_FILES[0]), 28, 28, &pixels[..cut])?;
    write_idx_labels(dir.join(MNIST_FILES[1]), &labels[..train])?;
    write_idx_images(dir.join(MNIST_FILES[2]), 28, 28, &pixels[cut..])?;
    write_idx_labels(dir.join(MNIST_FILES[3]), &labels[train..])?;
    Ok(())
}

/// Index-based assignment of samples to subdomains.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPartition {
    pub subsets: Vec<Vec<usize>>,
    /// Indices given to every subset.
    pub shared: Vec<usize>,
    pub overlap_fraction: f64,
    pub seed: u64,
}

impl DatasetPartition {
    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }
}

pub(crate) fn overlap_count(fraction: f64, len: usize) -> usize {
    // guard against products like 0.05 * 2000 landing a hair below an integer
    (fraction * len as f64 + 1e-9).floor() as usize
}

fn check_overlap(fraction: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(Error::invalid(format!(
            "overlap fraction must lie in [0, 0.5], got {fraction}"
        )));
    }
    Ok(())
}

/// Splits `0..len` into `n` subsets; see [`partition_indices`].
pub fn partition(len: usize, n: usize, overlap_fraction: f64, seed: u64) -> Result<DatasetPartition> {
    let all: Vec<usize> = (0..len).collect();
    partition_indices(&all, n, overlap_fraction, seed)
}

/// Shuffles `base`, gives its first `⌊ω·len⌋` entries to every subset, and
/// deals the rest into `n` contiguous near-equal parts. With `n = 1` the
/// single subset is `base` in its original order.
pub fn partition_indices(
    base: &[usize],
    n: usize,
    overlap_fraction: f64,
    seed: u64,
) -> Result<DatasetPartition> {
    check_overlap(overlap_fraction)?;
    if n == 0 {
        return Err(Error::invalid("subdomain count must be at least 1"));
    }
    if n > base.len() {
        return Err(Error::invalid(format!(
            "cannot split {} samples into {n} subdomains",
            base.len()
        )));
    }
    let mut perm = base.to_vec();
    // a single subdomain keeps the caller's order so its loss sums match
    // the undivided objective bit for bit
    if n > 1 {
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let n_shared = overlap_count(overlap_fraction, perm.len());
    let (shared, rest) = perm.split_at(n_shared);
    let (q, r) = (rest.len() / n, rest.len() % n);
    let mut subsets = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let size = q + usize::from(i < r);
        let mut subset = shared.to_vec();
        subset.extend_from_slice(&rest[start..start + size]);
        start += size;
        if subset.is_empty() {
            return Err(Error::invalid(format!(
                "subdomain {i} would be empty ({} samples, {n} subdomains)",
                base.len()
            )));
        }
        subsets.push(subset);
    }
    Ok(DatasetPartition {
        subsets,
        shared: shared.to_vec(),
        overlap_fraction,
        seed,
    })
}

/// One epoch of minibatches over a seeded permutation of `0..len`.
///
/// Consecutive minibatches share `⌊ω·size⌋` indices: the tail of batch `t`
/// is the head of batch `t+1`. The final batch is truncated at the end of
/// the permutation.
pub fn minibatch_stream(
    len: usize,
    minibatch_size: usize,
    overlap_fraction: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    check_overlap(overlap_fraction)?;
    if minibatch_size == 0 || minibatch_size > len {
        return Err(Error::invalid(format!(
            "minibatch size {minibatch_size} must lie in 1..={len}"
        )));
    }
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let overlap = overlap_count(overlap_fraction, minibatch_size);
    let stride = minibatch_size - overlap;
    let mut batches = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + minibatch_size).min(len);
        batches.push(perm[start..end].to_vec());
        start += stride;
        if end == len || start + overlap >= len {
            break;
        }
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn idx_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        let pixels: Vec<u8> = (0..2 * 3 * 2).map(|i| (i * 21) as u8).collect();
        write_idx_images(&img, 3, 2, &pixels).unwrap();
        write_idx_labels(&lab, &[7, 1]).unwrap();

        // check the header bytes by hand
        let raw = fs::read(&img).unwrap();
        assert_eq!(&raw[..4], &[0, 0, 8, 3]);
        assert_eq!(&raw[4..8], &[0, 0, 0, 2]);
        assert_eq!(&raw[16..], &pixels[..]);

        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_dim, 6);
        let back: Vec<u8> = ds.inputs.iter().map(|x| (x * 255.0).round() as u8).collect();
        assert_eq!(back, pixels);
        assert_eq!(ds.targets, Targets::Classes(vec![7, 1]));
    }

    #[test]
    fn idx_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty");
        fs::write(&empty, b"").unwrap();
        let lab = dir.path().join("lab");
        write_idx_labels(&lab, &[1]).unwrap();
        let err = load_idx(&empty, &lab).unwrap_err();
        assert!(err.to_string().contains("truncated header"), "{err}");

        let img = dir.path().join("img");
        write_idx_images(&img, 1, 1, &[5, 6]).unwrap();
        let err = load_idx(&img, &lab).unwrap_err();
        assert!(matches!(
            err,
            Error::Idx { kind: IdxError::CountMismatch { images: 2, labels: 1 }, .. }
        ));

        let err = load_idx(&lab, &lab).unwrap_err();
        assert!(matches!(err, Error::Idx { kind: IdxError::BadMagic { .. }, .. }));

        let mut raw = fs::read(&img).unwrap();
        raw.pop();
        fs::write(&img, raw).unwrap();
        let err = load_idx(&img, &lab).unwrap_err();
        assert!(matches!(
            err,
            Error::Idx { kind: IdxError::TruncatedPayload { expected: 2, found: 1 }, .. }
        ));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synth_classification(100, 2, 2, 7).unwrap();
        let b = synth_classification(100, 2, 2, 7).unwrap();
        assert_eq!(a, b);
        let mut counts = synth_classification(103, 2, 2, 1).unwrap().class_counts(2);
        counts.sort();
        assert_eq!(counts, vec![51, 52]);
        assert!(a.inputs.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(synth_classification(1, 2, 2, 0).is_err());
    }

    #[test]
    fn partition_with_overlap() {
        let part = partition(10_000, 2, 0.05, 3).unwrap();
        assert_eq!(part.shared.len(), 500);
        for s in &part.subsets {
            assert_eq!(s.len(), 5250);
        }
        let a: HashSet<_> = part.subsets[0].iter().collect();
        let b: HashSet<_> = part.subsets[1].iter().collect();
        assert_eq!(a.intersection(&b).count(), 500);
    }

    #[test]
    fn partition_disjoint_and_single() {
        let part = partition(100, 4, 0.0, 1).unwrap();
        let mut all: Vec<usize> = part.subsets.iter().flatten().copied().collect();
        assert!(part.subsets.iter().all(|s| s.len() == 25));
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());

        let one = partition(50, 1, 0.3, 9).unwrap();
        let mut s = one.subsets[0].clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());

        assert!(partition(3, 4, 0.0, 0).is_err());
        assert!(partition(10, 2, 0.6, 0).is_err());
    }

    #[test]
    fn minibatches_without_overlap() {
        let batches = minibatch_stream(60_000, 10_000, 0.0, 0).unwrap();
        assert_eq!(batches.len(), 6);
        let mut seen = HashSet::new();
        for b in &batches {
            assert_eq!(b.len(), 10_000);
            for &i in b {
                assert!(seen.insert(i));
            }
        }
        assert_eq!(seen.len(), 60_000);
    }

    #[test]
    fn full_size_minibatch_ignores_overlap() {
        let batches = minibatch_stream(500, 500, 0.3, 4).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 500);
    }

    #[test]
    fn consecutive_minibatches_share_overlap() {
        let batches = minibatch_stream(60_000, 10_000, 0.05, 2).unwrap();
        for w in batches.windows(2) {
            let a: HashSet<_> = w[0].iter().collect();
            let shared = w[1].iter().filter(|i| a.contains(i)).count();
            assert_eq!(shared, 500);
        }
        let covered: HashSet<_> = batches.iter().flatten().collect();
        assert_eq!(covered.len(), 60_000);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partition_invariants(
                len in 1usize..400,
                n in 1usize..9,
                omega in 0.0f64..=0.5,
                seed in any::<u64>(),
            ) {
                prop_assume!(n <= len);
                let part = partition(len, n, omega, seed).unwrap();
                let again = partition(len, n, omega, seed).unwrap();
                prop_assert_eq!(&part, &again);
                let shared = overlap_count(omega, len);
                let covered: HashSet<_> = part.subsets.iter().flatten().copied().collect();
                prop_assert_eq!(covered.len(), len);
                let sizes: Vec<_> = part.subsets.iter().map(Vec::len).collect();
                let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
                prop_assert!(hi - lo <= 1 && *lo >= 1);
                for i in 0..n {
                    for j in (i + 1)..n {
                        let a: HashSet<_> = part.subsets[i].iter().collect();
                        let overlap = part.subsets[j].iter().filter(|x| a.contains(x)).count();
                        prop_assert_eq!(overlap, shared);
                    }
                }
            }

            #[test]
            fn minibatch_invariants(
                len in 1usize..600,
                size_frac in 0.05f64..=1.0,
                omega in 0.0f64..=0.5,
                seed in any::<u64>(),
            ) {
                let size = ((len as f64 * size_frac).ceil() as usize).clamp(1, len);
                let batches = minibatch_stream(len, size, omega, seed).unwrap();
                let covered: HashSet<_> = batches.iter().flatten().copied().collect();
                prop_assert_eq!(covered.len(), len);
                let overlap = overlap_count(omega, size);
                for w in batches.windows(2) {
                    let a: HashSet<_> = w[0].iter().collect();
                    prop_assert_eq!(w[1].iter().filter(|i| a.contains(i)).count(), overlap);
                    prop_assert_eq!(&w[0][w[0].len() - overlap..], &w[1][..overlap]);
                }
            }
        }
    }
}
