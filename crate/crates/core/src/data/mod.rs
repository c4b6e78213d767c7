//! Datasets, partition regimes and the shared public reference set.

mod io;
mod partition;
mod split;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::rng_from;

pub use io::{load_dataset, write_csv, DataFormat};
pub use partition::{partition, partition_indices, Partition, Regime};
pub use split::{holdout_split, make_public_reference, HoldoutSplit, PublicSet};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {bad} >= {num_classes} classes")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index(format!("row {bad} >= {}", self.len())));
        }
        Ok(Dataset {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: name.into(),
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            self.inputs.select(Axis(0), indices),
            Some(indices.iter().map(|&i| self.labels[i]).collect()),
            self.num_classes,
        )
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(self.labels.iter().copied(), self.num_classes)
    }

    /// Rescales every feature column to `[0, 1]` (constant columns map to 0).
    pub fn min_max_scaled(mut self) -> Self {
        for mut col in self.inputs.axis_iter_mut(Axis(1)) {
            let lo = col.fold(f64::INFINITY, |m, &v| m.min(v));
            let hi = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let span = hi - lo;
            col.mapv_inplace(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
        }
        self
    }
}

pub(crate) fn histogram(labels: impl Iterator<Item = usize>, classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for y in labels {
        h[y] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    pub dim: usize,
    /// Standard deviation of the isotropic noise around each class mean.
    pub spread: f64,
    pub seed: u64,
}

const MEAN_SCALE: f64 = 3.0;

/// Class means: scaled simplex vertices `3·e_c` when `C ≤ d`, otherwise a ring
/// of radius `3·C/(2π)` in the first two coordinates (unit spacing ×3).
fn class_means(classes: usize, dim: usize) -> Array2<f64> {
    let mut means = Array2::zeros((classes, dim));
    if classes <= dim {
        for c in 0..classes {
            means[[c, c]] = MEAN_SCALE;
        }
    } else {
        let radius = MEAN_SCALE * classes as f64 / std::f64::consts::TAU;
        for c in 0..classes {
            let theta = std::f64::consts::TAU * c as f64 / classes as f64;
            means[[c, 0]] = radius * theta.cos();
            means[[c, 1]] = radius * theta.sin();
        }
    }
    means
}

/// Gaussian class clusters with balanced class counts (within ±1).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Parameter("need at least 2 classes".into()));
    }
    if spec.samples < spec.classes {
        return Err(Error::Parameter(format!(
            "{} samples cannot cover {} classes",
            spec.samples, spec.classes
        )));
    }
    if spec.dim < 2 {
        return Err(Error::Parameter("dimension must be >= 2".into()));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(Error::Parameter(format!(
            "spread must be >= 0, got {}",
            spec.spread
        )));
    }
    let mut rng = rng_from(spec.seed);
    let means = class_means(spec.classes, spec.dim);
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let mut inputs = Array2::zeros((spec.samples, spec.dim));
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..spec.dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            inputs[[i, j]] = means[[y, j]] + spec.spread * noise;
        }
    }
    Dataset::new(inputs, labels, spec.classes, "synthetic")
}

/// Accuracy of assigning each row to the closest true class mean.
pub fn nearest_centroid_accuracy(ds: &Dataset) -> f64 {
    let means = class_means(ds.num_classes, ds.dim());
    let correct = ds
        .inputs
        .axis_iter(Axis(0))
        .zip(&ds.labels)
        .filter(|(row, &y)| {
            let best = (0..ds.num_classes)
                .map(|c| {
                    let d: f64 = row
                        .iter()
                        .zip(means.row(c))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (c, d)
                })
                .fold(
                    (0, f64::INFINITY),
                    |b, (c, d)| if d < b.1 { (c, d) } else { b },
                );
            best.0 == y
        })
        .count();
    correct as f64 / ds.len() as f64
}
