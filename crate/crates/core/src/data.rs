//! In-memory datasets, synthetic generators and seeded batching.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Labelled samples with features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    splits: Vec<Split>,
    class_count: usize,
}

impl Dataset {
    /// Builds a dataset with every sample tagged [`Split::Train`].
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = labels.len();
        Self::with_splits(features, labels, vec![Split::Train; n], class_count)
    }

    pub fn with_splits(
        features: Tensor,
        labels: Vec<usize>,
        splits: Vec<Split>,
        class_count: usize,
    ) -> Result<Self> {
        let (rows, _) = features.dims2()?;
        if rows != labels.len() || rows != splits.len() {
            return Err(Error::invalid(format!(
                "{rows} feature rows but {} labels and {} split tags",
                labels.len(),
                splits.len()
            )));
        }
        if features.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("features must lie in [0, 1]"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            features,
            labels,
            splits,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Features and labels of the given rows.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// Samples tagged with `split`, in their original order.
    pub fn subset(&self, split: Split) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        let (features, labels) = self.batch(&idx).expect("indices in range");
        Dataset {
            features,
            labels,
            splits: vec![split; idx.len()],
            class_count: self.class_count,
        }
    }

    /// Retags a seeded random `test_fraction` of the samples as test data.
    pub fn split_holdout(mut self, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::invalid("test fraction must lie in [0, 1)"));
        }
        let n_test = libm::round(self.len() as f64 * test_fraction) as usize;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seeded(seed));
        self.splits.fill(Split::Train);
        for &i in &order[..n_test] {
            self.splits[i] = Split::Test;
        }
        Ok(self)
    }

    /// Appends the samples of `other`, keeping their split tags.
    pub fn concat(mut self, other: Dataset) -> Result<Self> {
        if self.dim() != other.dim() || self.class_count != other.class_count {
            return Err(Error::invalid("datasets differ in feature width or class count"));
        }
        let mut data = self.features.into_data();
        data.extend_from_slice(other.features.data());
        let rows = self.labels.len() + other.labels.len();
        self.features = Tensor::new(vec![rows, other.dim()], data)?;
        self.labels.extend(other.labels);
        self.splits.extend(other.splits);
        Ok(self)
    }
}

/// Two interleaved half circles with Gaussian noise, mapped into `[0, 1]²`.
///
/// Class 0 is the upper arc `(cos t, sin t)`, class 1 the lower arc
/// `(1 − cos t, 0.5 − sin t)`, `t ∈ [0, π]`. Each axis is mapped affinely
/// from the arcs' bounding box widened by `3σ` on every side, then clipped.
pub fn make_two_moons(n: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::invalid(format!("two moons needs an even n >= 2, got {n}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid("noise sigma must be finite and non-negative"));
    }
    let half = n / 2;
    let mut rng = seeded(seed);
    let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
    let margin = 3.0 * noise_sigma;
    let (x_lo, x_span) = (-1.0 - margin, 3.0 + 2.0 * margin);
    let (y_lo, y_span) = (-0.5 - margin, 1.5 + 2.0 * margin);

    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2 {
        for i in 0..half {
            let t = if half == 1 { 0.0 } else { PI * i as f64 / (half - 1) as f64 };
            let (cx, cy) = if class == 0 {
                (libm::cos(t), libm::sin(t))
            } else {
                (1.0 - libm::cos(t), 0.5 - libm::sin(t))
            };
            let (nx, ny) = if noise_sigma > 0.0 {
                (noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            data.push(((cx + nx - x_lo) / x_span).clamp(0.0, 1.0));
            data.push(((cy + ny - y_lo) / y_span).clamp(0.0, 1.0));
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2)
}

/// Isotropic Gaussian clusters around `centers` (given in `[0, 1]^d`),
/// clipped to the unit cube. Sample `i` belongs to cluster `i mod centers`.
pub fn make_blobs(n: usize, centers: &[Vec<f64>], sigma: f64, seed: u64) -> Result<Dataset> {
    if centers.len() < 2 {
        return Err(Error::invalid("blobs need at least two centers"));
    }
    let d = centers[0].len();
    if d == 0 || centers.iter().any(|c| c.len() != d) {
        return Err(Error::invalid("all centers need the same positive dimension"));
    }
    if centers.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("centers must lie in [0, 1]^d"));
    }
    for (i, a) in centers.iter().enumerate() {
        if centers[..i].iter().any(|b| b == a) {
            return Err(Error::invalid("centers must be distinct"));
        }
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma must be finite and non-negative"));
    }
    let mut rng = seeded(seed);
    let noise = Normal::new(0.0, sigma).expect("validated sigma");
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % centers.len();
        for &c in &centers[class] {
            let offset = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push((c + offset).clamp(0.0, 1.0));
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, d], data)?, labels, centers.len())
}

/// Seeded mini-batch order: every epoch is a fresh permutation determined
/// by `(seed, epoch)`, split into consecutive batches (the last may be short).
#[derive(Debug, Clone)]
pub struct BatchIterator {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(Self {
            len,
            batch_size,
            seed,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn permutation(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut seeded(derive_seed(self.seed, epoch as u64)));
        order
    }

    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        self.permutation(epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<Vec<usize>>;

    /// Batches of the current epoch; advances the epoch counter.
    fn next(&mut self) -> Option<Self::Item> {
        let out = self.batches(self.epoch);
        self.epoch += 1;
        Some(out)
    }
}
