use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::scalar::Scalar;

/// Feature matrix with optional integer labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Dataset<T> {
    features: Matrix<T>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn labeled(features: Matrix<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::dim("Dataset labels", features.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Argument(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            features,
            labels: Some(labels),
            num_classes,
        })
    }

    pub fn unlabeled(features: Matrix<T>) -> Self {
        Self {
            features,
            labels: None,
            num_classes: 0,
        }
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Labels, or an argument error for unlabeled data.
    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| Error::Argument("dataset has no labels".into()))
    }

    /// Declared number of classes; 0 for unlabeled data.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Drops the labels, as for auxiliary data.
    pub fn without_labels(&self) -> Self {
        Self::unlabeled(self.features.clone())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        }
    }

    /// One-hot label rows for cross-entropy training.
    pub fn one_hot(&self, indices: &[usize]) -> Result<Matrix<T>> {
        let labels = self.require_labels()?;
        let mut m = Matrix::zeros(indices.len(), self.num_classes);
        for (r, &i) in indices.iter().enumerate() {
            m.set(r, labels[i], T::one());
        }
        Ok(m)
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let labels = self.require_labels()?;
        let mut counts = vec![0; self.num_classes];
        for &l in labels {
            counts[l] += 1;
        }
        Ok(counts)
    }
}

/// Shuffled mini-batches of `0..n`; the last batch may be short.
pub fn minibatches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Result of splitting the auxiliary data into negatives and distillation data.
///
/// Both parts keep the original row order; the index vectors refer to rows of
/// the auxiliary dataset that was split.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxSplit<T> {
    pub negatives: Dataset<T>,
    pub distill: Dataset<T>,
    pub negative_indices: Vec<usize>,
    pub distill_indices: Vec<usize>,
}

/// Default share of the auxiliary data used for distillation.
pub const DEFAULT_DISTILL_FRACTION: f64 = 0.8;

/// Disjoint random split with `|distill| = round(fraction·|aux|)`.
pub fn split_auxiliary<T: Scalar>(aux: &Dataset<T>, distill_fraction: f64, seed: u64) -> Result<AuxSplit<T>> {
    if !(distill_fraction > 0.0 && distill_fraction < 1.0) {
        return Err(Error::param(
            "distill_fraction",
            format!("must lie in (0, 1), got {distill_fraction}"),
        ));
    }
    if aux.is_empty() {
        return Err(Error::Argument("auxiliary dataset is empty".into()));
    }
    let n = aux.len();
    let n_distill = (distill_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut distill_indices = order[..n_distill].to_vec();
    let mut negative_indices = order[n_distill..].to_vec();
    distill_indices.sort_unstable();
    negative_indices.sort_unstable();
    Ok(AuxSplit {
        negatives: aux.subset(&negative_indices),
        distill: aux.subset(&distill_indices),
        negative_indices,
        distill_indices,
    })
}
