//! Seeded synthetic datasets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::scalar::Scalar;

/// Synthetic generator description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    /// Isotropic Gaussian per class around the given centers.
    GaussianBlobs { centers: Vec<Vec<f64>>, std: f64 },
    /// Two interleaved half circles in 2-D.
    TwoMoons { noise: f64 },
    /// Three 4-D Gaussian classes with per-feature means and spreads close to
    /// the classic iris measurements.
    IrisLike,
}

const IRIS_MEANS: [[f64; 4]; 3] = [
    [5.006, 3.428, 1.462, 0.246],
    [5.936, 2.770, 4.260, 1.326],
    [6.588, 2.974, 5.552, 2.026],
];
const IRIS_STDS: [[f64; 4]; 3] = [
    [0.352, 0.379, 0.174, 0.105],
    [0.516, 0.314, 0.470, 0.198],
    [0.636, 0.322, 0.552, 0.275],
];

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            SyntheticSpec::GaussianBlobs { centers, .. } => centers.len(),
            SyntheticSpec::TwoMoons { .. } => 2,
            SyntheticSpec::IrisLike => 3,
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            SyntheticSpec::GaussianBlobs { centers, .. } => centers.first().map_or(0, Vec::len),
            SyntheticSpec::TwoMoons { .. } => 2,
            SyntheticSpec::IrisLike => 4,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            SyntheticSpec::GaussianBlobs { centers, std } => {
                if centers.is_empty() {
                    return Err(Error::param("centers", "at least one center required"));
                }
                let d = centers[0].len();
                if d == 0 || centers.iter().any(|c| c.len() != d) {
                    return Err(Error::param("centers", "centers must share a non-zero dimension"));
                }
                if !(*std >= 0.0) {
                    return Err(Error::param("std", format!("must be non-negative, got {std}")));
                }
            }
            SyntheticSpec::TwoMoons { noise } => {
                if !(*noise >= 0.0) {
                    return Err(Error::param("noise", format!("must be non-negative, got {noise}")));
                }
            }
            SyntheticSpec::IrisLike => {}
        }
        Ok(())
    }

    fn sample_class<R: Rng>(&self, class: usize, rng: &mut R, out: &mut Vec<f64>) {
        fn normal<R: Rng>(rng: &mut R) -> f64 {
            StandardNormal.sample(rng)
        }
        match self {
            SyntheticSpec::GaussianBlobs { centers, std } => {
                out.extend(centers[class].iter().map(|&c| c + std * normal(rng)));
            }
            SyntheticSpec::TwoMoons { noise } => {
                let t: f64 = rng.random::<f64>() * std::f64::consts::PI;
                let (x, y) = if class == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                out.push(x + noise * normal(rng));
                out.push(y + noise * normal(rng));
            }
            SyntheticSpec::IrisLike => {
                for j in 0..4 {
                    out.push(IRIS_MEANS[class][j] + IRIS_STDS[class][j] * normal(rng));
                }
            }
        }
    }
}

/// Draws `n` labeled samples. Classes receive `n / k` samples each, the first
/// `n % k` classes one more; rows are shuffled.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Dataset<T>> {
    spec.validate()?;
    let k = spec.num_classes();
    let d = spec.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.sort_unstable();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * d);
    for &label in &labels {
        spec.sample_class(label, &mut rng, &mut data);
    }
    let features = Matrix::from_vec(n, d, data.into_iter().map(T::of).collect())?;
    Dataset::labeled(features, labels, k)
}

/// `k` centers evenly spaced on a circle of the given radius.
pub fn circle_centers(k: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// `k` centers drawn uniformly from `[-half_width, half_width]^dims`.
pub fn random_centers(k: usize, dims: usize, half_width: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| (0..dims).map(|_| rng.random_range(-half_width..=half_width)).collect())
        .collect()
}
