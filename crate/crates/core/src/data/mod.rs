//! Datasets: IDX ingestion, synthetic blobs, seeded splits and victim training.

mod idx;
mod train;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::net::Tensor;
use crate::rng::{self, stream};
use crate::{Error, Result};

pub use idx::{encode_idx, load_idx, parse_images, parse_labels, write_idx, IMAGES_MAGIC, LABELS_MAGIC};
pub use train::{accuracy, train_victim, TrainConfig};

/// Labelled samples with features in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Input(format!(
                "features must be [N x d], got shape {:?}",
                features.shape()
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::Input(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Gaussian blobs around class centres drawn uniformly in `[0, 1]^dim`,
/// clamped to `[0, 1]`. Samples are ordered class by class.
pub fn gen_blobs(seed: u64, class_count: usize, dim: usize, per_class: usize, spread: f64) -> Result<Dataset> {
    if class_count < 2 || dim < 2 || per_class < 1 || spread < 0.0 || !spread.is_finite() {
        return Err(Error::Input(format!(
            "blobs need class_count >= 2, dim >= 2, per_class >= 1, spread >= 0 (got {class_count}, {dim}, {per_class}, {spread})"
        )));
    }
    let mut rng = rng::derived(seed, stream::BLOBS);
    let centers: Vec<Vec<f64>> = (0..class_count)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Input(e.to_string()))?;
    let mut data = Vec::with_capacity(class_count * per_class * dim);
    let mut labels = Vec::with_capacity(class_count * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &m in center {
                let v = if spread == 0.0 { m } else { m + noise.sample(&mut rng) };
                data.push(v.clamp(0.0, 1.0) as f32);
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![labels.len(), dim], data)?, labels, class_count)
}

/// Seeded stratified partition into `(train, test)`.
///
/// The test part has exactly `round(N * test_fraction)` samples, allocated
/// across classes by largest remainder, and every class with at least two
/// samples appears on both sides.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Input(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n = dataset.len();
    let total = (n as f64 * test_fraction).round() as usize;
    if n < 2 || total == 0 || total == n {
        return Err(Error::Input(format!(
            "cannot split {n} samples with test fraction {test_fraction}"
        )));
    }
    let mut rng = rng::derived(seed, stream::SPLIT);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let bounds: Vec<(usize, usize)> = by_class
        .iter()
        .map(|m| if m.len() >= 2 { (1, m.len() - 1) } else { (0, m.len()) })
        .collect();
    let ideal: Vec<f64> = by_class.iter().map(|m| m.len() as f64 * test_fraction).collect();
    let mut take: Vec<usize> = ideal
        .iter()
        .zip(&bounds)
        .map(|(&v, &(lo, hi))| (v.floor() as usize).clamp(lo, hi))
        .collect();
    let mut assigned: usize = take.iter().sum();
    while assigned != total {
        // Move one sample at a time toward the class whose share is furthest
        // from its ideal, ties to the lowest class index.
        let grow = assigned < total;
        let pick = (0..take.len())
            .filter(|&c| if grow { take[c] < bounds[c].1 } else { take[c] > bounds[c].0 })
            .max_by(|&a, &b| {
                let gap = |c: usize| if grow { ideal[c] - take[c] as f64 } else { take[c] as f64 - ideal[c] };
                gap(a).total_cmp(&gap(b)).then(b.cmp(&a))
            })
            .ok_or_else(|| {
                Error::Input(format!(
                    "cannot place {total} test samples while keeping every class on both sides"
                ))
            })?;
        if grow {
            take[pick] += 1;
            assigned += 1;
        } else {
            take[pick] -= 1;
            assigned -= 1;
        }
    }
    let mut test_idx = Vec::with_capacity(total);
    let mut train_idx = Vec::with_capacity(n - total);
    for (members, &t) in by_class.iter().zip(&take) {
        test_idx.extend_from_slice(&members[..t]);
        train_idx.extend_from_slice(&members[t..]);
    }
    train_idx.shuffle(&mut rng);
    test_idx.shuffle(&mut rng);
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}
