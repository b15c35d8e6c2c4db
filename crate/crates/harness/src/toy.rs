//! Weighted versus plain ensemble on a small non-iid problem: three clients
//! train linear classifiers on mostly single-class data from an iris-like
//! distribution projected to its two principal components. Client certainty
//! is a Gaussian kernel density estimate of the local data, or optionally a
//! scoring head fitted against shared public samples.

use auxdistill::aggregate::{aggregate_mean, aggregate_weighted};
use auxdistill::data::{generate_synthetic, Dataset, SyntheticSpec};
use auxdistill::model::argmax;
use auxdistill::numeric::{mlp_forward_backward, Activation, Dense, LossKind, Matrix, Mlp, OptimizerState};
use auxdistill::scoring::{PrivacyParams, Sanitization, ScoringHead, SolverOptions};
use auxdistill::seed::{derive_seed, rng_for};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::{FeatureMap, Gaussian2};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleToyConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_public: usize,
    /// Probability that a training sample goes to the client matching its class.
    pub majority: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub certainty: Certainty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Certainty {
    /// Gaussian KDE with Scott's bandwidth.
    Kde,
    /// Noiseless scoring head on lifted features against public samples.
    ScoringHead { lambda: f64, feature_map: FeatureMap },
}

impl Default for EnsembleToyConfig {
    fn default() -> Self {
        Self {
            n_train: 300,
            n_test: 600,
            n_public: 1000,
            majority: 0.95,
            steps: 300,
            learning_rate: 0.05,
            certainty: Certainty::Kde,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleToyOutcome {
    pub weighted_accuracy: f64,
    pub mean_accuracy: f64,
    pub client_accuracies: Vec<f64>,
}

/// Top two principal directions of `x` (power iteration with deflation) and
/// the column means.
fn principal_axes(x: &Matrix<f64>) -> (Vec<f64>, [Vec<f64>; 2]) {
    let (n, d) = x.shape();
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in x.iter_rows() {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (row[a] - mean[a]) * (row[b] - mean[b]) / n as f64;
            }
        }
    }
    let mut axes: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    for axis in &mut axes {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + j as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w: Vec<f64> = (0..d).map(|a| (0..d).map(|b| cov[a][b] * v[b]).sum()).collect();
            lambda = auxdistill::numeric::norm(&w);
            if lambda == 0.0 {
                break;
            }
            v = w.iter().map(|x| x / lambda).collect();
        }
        for a in 0..d {
            for b in 0..d {
                cov[a][b] -= lambda * v[a] * v[b];
            }
        }
        *axis = v;
    }
    (mean, axes)
}

fn project(x: &Matrix<f64>, mean: &[f64], axes: &[Vec<f64>; 2]) -> Vec<[f64; 2]> {
    x.iter_rows()
        .map(|row| {
            let c = |a: &Vec<f64>| row.iter().zip(mean).zip(a).map(|((v, m), w)| (v - m) * w).sum::<f64>();
            [c(&axes[0]), c(&axes[1])]
        })
        .collect()
}

fn to_matrix(points: &[[f64; 2]]) -> Matrix<f64> {
    Matrix::from_vec(points.len(), 2, points.iter().flatten().copied().collect()).expect("two columns")
}

/// Full-batch multinomial logistic regression from zero weights.
fn train_linear(x: &Matrix<f64>, labels: &[usize], k: usize, cfg: &EnsembleToyConfig) -> Result<Mlp<f64>> {
    let mut net = Mlp::new(vec![Dense::zeros(x.cols(), k, Activation::Identity)])?;
    let target = Dataset::labeled(x.clone(), labels.to_vec(), k)?.one_hot(&(0..labels.len()).collect::<Vec<_>>())?;
    let mut opt = OptimizerState::adam(cfg.learning_rate, net.param_count())?;
    for _ in 0..cfg.steps {
        let (_, grad) = mlp_forward_backward(&net, x, &target, LossKind::CrossEntropy)?;
        let mut p = net.params();
        opt.step(&mut p, &grad)?;
        net.set_params(&p)?;
    }
    Ok(net)
}

/// `ξ + (1/n) Σ_j N(x; x_j, h²I)` with `h = σ̄ n^{-1/6}`, σ̄ the mean
/// per-axis standard deviation of the sample.
fn kde_scores(sample: &[[f64; 2]], at: &[[f64; 2]], xi: f64) -> Vec<f64> {
    let n = sample.len() as f64;
    let sd = |a: usize| {
        let m = sample.iter().map(|p| p[a]).sum::<f64>() / n;
        (sample.iter().map(|p| (p[a] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
    };
    let h = (0.5 * (sd(0) + sd(1))).max(1e-6) * n.powf(-1.0 / 6.0);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * h * h * n);
    at.iter()
        .map(|x| {
            let k: f64 = sample
                .iter()
                .map(|p| (-((x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2)) / (2.0 * h * h)).exp())
                .sum();
            xi + norm * k
        })
        .collect()
}

fn accuracy(probabilities: &Matrix<f64>, labels: &[usize]) -> f64 {
    let hits = probabilities
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn weighted_vs_mean_toy(seed: u64, cfg: &EnsembleToyConfig) -> Result<EnsembleToyOutcome> {
    let spec = SyntheticSpec::IrisLike;
    let k = spec.num_classes();
    let train: Dataset<f64> = generate_synthetic(&spec, cfg.n_train, derive_seed(seed, "toy-train", &[]))?;
    let test: Dataset<f64> = generate_synthetic(&spec, cfg.n_test, derive_seed(seed, "toy-test", &[]))?;
    let (mean, axes) = principal_axes(train.features());
    let train_pts = project(train.features(), &mean, &axes);
    let test_pts = project(test.features(), &mean, &axes);
    let train_labels = train.require_labels()?;
    let test_labels = test.require_labels()?;

    // Public data: a broad Gaussian over the projected training cloud.
    let spread = train_pts.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>() / train_pts.len() as f64;
    let public =
        Gaussian2::isotropic([0.0, 0.0], 2.0 * spread).sample(cfg.n_public, &mut rng_for(seed, "toy-public", &[]));
    let test_x = to_matrix(&test_pts);

    let mut rng = rng_for(seed, "toy-assign", &[]);
    let mut members = vec![Vec::new(); k];
    for (i, &y) in train_labels.iter().enumerate() {
        let client = if rng.random::<f64>() < cfg.majority {
            y
        } else {
            (y + 1 + rng.random_range(0..k - 1)) % k
        };
        members[client].push(i);
    }

    let xi = PrivacyParams::default().xi;
    let mut logits = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    let mut client_accuracies = Vec::with_capacity(k);
    for idx in &members {
        let pts: Vec<[f64; 2]> = idx.iter().map(|&i| train_pts[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
        let net = train_linear(&to_matrix(&pts), &labels, k, cfg)?;
        let z = net.forward(&test_x)?;
        client_accuracies.push(accuracy(&z, test_labels));
        logits.push(z);
        scores.push(match cfg.certainty {
            Certainty::Kde => kde_scores(&pts, &test_pts, xi),
            Certainty::ScoringHead { lambda, feature_map } => {
                let privacy = PrivacyParams {
                    lambda,
                    ..PrivacyParams::default()
                };
                let head = ScoringHead::fit(
                    &feature_map.apply(&pts),
                    &feature_map.apply(&public),
                    &privacy,
                    SolverOptions::default(),
                    Sanitization::Disabled,
                )?;
                head.score(&feature_map.apply(&test_pts))?
            }
        });
    }

    let weighted = aggregate_weighted(&logits, &scores)?;
    let mean = aggregate_mean(&logits)?;
    Ok(EnsembleToyOutcome {
        weighted_accuracy: accuracy(weighted.probabilities(), test_labels),
        mean_accuracy: accuracy(mean.probabilities(), test_labels),
        client_accuracies,
    })
}
