//! Non-iid client splits from a symmetric Dirichlet prior.
//!
//! For every class `j` a vector `p_j ~ Dir(α)` over the `n` clients is drawn.
//! The stacked matrix `P ∈ R^{n×c}` is standardized by alternately normalizing
//! its columns and rows for a fixed number of iterations, after which client
//! `i` receives a `P_ij / Σ_k P_kj` share of the samples of class `j`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of column/row normalization sweeps.
pub const STANDARDIZATION_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    /// Client index of every sample.
    pub assignments: Vec<usize>,
    pub n_clients: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Standardized `P` (row-major, `n_clients × classes`).
    pub proportions: Vec<f64>,
    /// Column sums of the standardized `P`, kept as a diagnostic.
    pub column_sums: Vec<f64>,
}

impl PartitionPlan {
    pub fn num_classes(&self) -> usize {
        self.column_sums.len()
    }

    /// Row sums of the standardized `P`.
    pub fn row_sums(&self) -> Vec<f64> {
        let c = self.num_classes();
        self.proportions.chunks(c).map(|r| r.iter().sum()).collect()
    }

    /// Sample indices owned by `client`, ascending.
    pub fn client_indices(&self, client: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == client)
            .map(|(i, _)| i)
            .collect()
    }

    /// Splits a dataset (the one whose labels were partitioned) into client shards.
    pub fn shards<T: Scalar>(&self, dataset: &Dataset<T>) -> Result<Vec<Dataset<T>>> {
        if dataset.len() != self.assignments.len() {
            return Err(Error::dim(
                "PartitionPlan::shards",
                self.assignments.len(),
                dataset.len(),
            ));
        }
        let mut per_client = vec![Vec::new(); self.n_clients];
        for (i, &c) in self.assignments.iter().enumerate() {
            per_client[c].push(i);
        }
        Ok(per_client.iter().map(|idx| dataset.subset(idx)).collect())
    }

    /// `histograms[client][class]` sample counts.
    pub fn class_histograms(&self, labels: &[usize]) -> Vec<Vec<usize>> {
        let mut h = vec![vec![0; self.num_classes()]; self.n_clients];
        for (&c, &l) in self.assignments.iter().zip(labels) {
            h[c][l] += 1;
        }
        h
    }
}

/// `ln X` for `X ~ Gamma(shape, 1)`, accurate for very small shapes where `X`
/// itself underflows: `Gamma(a) = Gamma(a + 1) · U^{1/a}`.
fn sample_log_gamma<R: Rng>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).expect("valid gamma shape");
        return g.sample(rng).ln();
    }
    let g = Gamma::new(shape + 1.0, 1.0).expect("valid gamma shape");
    let x: f64 = g.sample(rng);
    let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    x.ln() + u.ln() / shape
}

/// Draw from a symmetric `n`-categorical Dirichlet.
pub fn sample_symmetric_dirichlet<R: Rng>(n: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = (0..n).map(|_| sample_log_gamma(alpha, rng)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = p.iter().sum();
    for x in &mut p {
        *x /= s;
    }
    p
}

/// Alternating column-then-row normalization of a row-major `rows × cols`
/// matrix. All-zero lines are left untouched.
pub fn standardize(p: &mut [f64], rows: usize, cols: usize, iterations: usize) {
    for _ in 0..iterations {
        for j in 0..cols {
            let s: f64 = (0..rows).map(|i| p[i * cols + j]).sum();
            if s > 0.0 {
                for i in 0..rows {
                    p[i * cols + j] /= s;
                }
            }
        }
        for row in p.chunks_mut(cols) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                for x in row {
                    *x /= s;
                }
            }
        }
    }
}

/// Integer counts summing to `total`: floors of `fractions · total`, with the
/// leftover samples going to the largest residuals (ties: lowest index).
pub fn apportion(fractions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub fn dirichlet_partition(labels: &[usize], n_clients: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(Error::param("n_clients", "at least one client required"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::param(
            "alpha",
            format!("must be positive and finite, got {alpha}"),
        ));
    }
    let c = labels
        .iter()
        .max()
        .map(|m| m + 1)
        .ok_or_else(|| Error::Partition("no samples to partition".into()))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Partition(format!("class {empty} has no samples")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![0.0; n_clients * c];
    for j in 0..c {
        let col = sample_symmetric_dirichlet(n_clients, alpha, &mut rng);
        for (i, v) in col.into_iter().enumerate() {
            p[i * c + j] = v;
        }
    }
    standardize(&mut p, n_clients, c, STANDARDIZATION_ITERATIONS);
    let column_sums: Vec<f64> = (0..c).map(|j| (0..n_clients).map(|i| p[i * c + j]).sum()).collect();

    let mut assignments = vec![usize::MAX; labels.len()];
    for (j, members) in by_class.iter_mut().enumerate() {
        let fractions: Vec<f64> = (0..n_clients).map(|i| p[i * c + j] / column_sums[j]).collect();
        let counts = apportion(&fractions, members.len());
        members.shuffle(&mut rng);
        let mut start = 0;
        for (client, &count) in counts.iter().enumerate() {
            for &idx in &members[start..start + count] {
                assignments[idx] = client;
            }
            start += count;
        }
    }
    debug_assert!(assignments.iter().all(|&a| a < n_clients));

    Ok(PartitionPlan {
        assignments,
        n_clients,
        alpha,
        seed,
        proportions: p,
        column_sums,
    })
}
