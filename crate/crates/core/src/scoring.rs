//! Differentially private certainty scores.
//!
//! Each client fits an ℓ2-regularized logistic discriminator between its own
//! (normalized) features and a public negative set, perturbs the weights with
//! calibrated Gaussian noise, and ships only the noisy head. Scores on public
//! data are a sigmoid of the head's margin plus a small floor `ξ`.
//!
//! The fitted objective is
//!
//! ```text
//! J(w) = 1/N Σ_x ln(1 + exp(t_x ⟨w, h̃(x)⟩)) + λ/2 ‖w‖²,   t_x = +1 local, −1 negative
//! ```
//!
//! which pushes local samples to negative margins. [`ScoringHead`] stores the
//! negated minimizer so that the score increases with similarity to local data.

use std::collections::VecDeque;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{sigmoid, softplus, Matrix};
use crate::scalar::Scalar;

/// Lower bound for the normalization constant on degenerate (all-zero) features.
pub const GAMMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    /// ℓ2 regularization strength of the scoring objective.
    pub lambda: f64,
    /// Additive score floor keeping every certainty strictly positive.
    pub xi: f64,
}

impl Default for PrivacyParams {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            delta: 1e-5,
            lambda: 0.1,
            xi: 1e-8,
        }
    }
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::param(
                "epsilon",
                format!("must be positive, got {}", self.epsilon),
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::param("delta", format!("must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::param("lambda", format!("must be positive, got {}", self.lambda)));
        }
        if !(self.xi > 0.0) || !self.xi.is_finite() {
            return Err(Error::param("xi", format!("must be positive, got {}", self.xi)));
        }
        Ok(())
    }
}

/// Stopping rule for [`fit_scoring_head`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_steps: usize,
    /// Target gradient norm.
    pub tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_steps: 1000,
            tol: 1e-8,
        }
    }
}

/// Largest row norm over the union of both feature sets.
pub fn compute_gamma<T: Scalar>(features_local: &Matrix<T>, features_negative: &Matrix<T>) -> Result<T> {
    if features_local.rows() + features_negative.rows() == 0 {
        return Err(Error::Argument("gamma of an empty feature set".into()));
    }
    if features_local.rows() > 0 && features_negative.rows() > 0 && features_local.cols() != features_negative.cols() {
        return Err(Error::dim(
            "negative features",
            features_local.cols(),
            features_negative.cols(),
        ));
    }
    let max = features_local
        .row_norms()
        .into_iter()
        .chain(features_negative.row_norms())
        .fold(T::zero(), T::max);
    if !max.is_finite() {
        return Err(Error::Numeric("non-finite feature norm".into()));
    }
    Ok(max.max(T::of(GAMMA_FLOOR)))
}

/// Labeled design for the logistic objective, held in f64.
struct Design {
    rows: Vec<f64>,
    signs: Vec<f64>,
    dim: usize,
}

impl Design {
    fn new<T: Scalar>(local: &Matrix<T>, negative: &Matrix<T>) -> Result<Self> {
        if local.rows() == 0 {
            return Err(Error::Argument("local feature set is empty".into()));
        }
        if negative.rows() == 0 {
            return Err(Error::Argument("negative feature set is empty".into()));
        }
        if local.cols() != negative.cols() {
            return Err(Error::dim("negative features", local.cols(), negative.cols()));
        }
        if !local.is_finite() || !negative.is_finite() {
            return Err(Error::Numeric("scoring features contain NaN or infinity".into()));
        }
        let rows = local
            .as_slice()
            .iter()
            .chain(negative.as_slice())
            .map(|x| x.as_f64())
            .collect();
        let mut signs = vec![1.0; local.rows()];
        signs.resize(local.rows() + negative.rows(), -1.0);
        Ok(Self {
            rows,
            signs,
            dim: local.cols(),
        })
    }

    fn objective(&self, w: &[f64], lambda: f64) -> (f64, Vec<f64>) {
        let n = self.signs.len() as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; self.dim];
        for (x, &t) in self.rows.chunks(self.dim).zip(&self.signs) {
            let z = t * x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            value += softplus(z);
            let coef = t * sigmoid(z);
            for (g, &xi) in grad.iter_mut().zip(x) {
                *g += coef * xi;
            }
        }
        let sq: f64 = w.iter().map(|v| v * v).sum();
        for (g, &wi) in grad.iter_mut().zip(w) {
            *g = *g / n + lambda * wi;
        }
        (value / n + 0.5 * lambda * sq, grad)
    }
}

/// Value and gradient of the scoring objective `J` at `w`.
pub fn erm_objective<T: Scalar>(
    w: &[T],
    features_local: &Matrix<T>,
    features_negative: &Matrix<T>,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let design = Design::new(features_local, features_negative)?;
    if w.len() != design.dim {
        return Err(Error::dim("scoring weights", design.dim, w.len()));
    }
    let w: Vec<f64> = w.iter().map(|v| v.as_f64()).collect();
    Ok(design.objective(&w, lambda))
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L-BFGS with backtracking (Armijo) line search, started at zero.
fn lbfgs(f: impl Fn(&[f64]) -> (f64, Vec<f64>), dim: usize, opts: SolverOptions) -> Vec<f64> {
    const MEMORY: usize = 10;
    let mut x = vec![0.0; dim];
    let (mut fx, mut g) = f(&x);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(MEMORY);
    for _ in 0..opts.max_steps {
        let gnorm = dot64(&g, &g).sqrt();
        if gnorm <= opts.tol {
            break;
        }
        // Two-loop recursion for d = -H g.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot64(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let scale = history
            .back()
            .map_or(1.0 / gnorm.max(1.0), |(s, y, _)| dot64(s, y) / dot64(y, y));
        for qi in &mut q {
            *qi *= scale;
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot64(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut d: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot64(&d, &g);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }

        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-20 {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = f(&trial);
            let armijo = ft <= fx + 1e-4 * step * slope;
            // Near the optimum J stops resolving in f64 before the gradient does;
            // a step that keeps J flat and shrinks the gradient is still progress.
            let flat = ft <= fx + 4.0 * f64::EPSILON * fx.abs() && dot64(&gt, &gt).sqrt() < gnorm;
            if armijo || flat {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot64(&s, &y);
        if sy > 1e-300 {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        fx = fnew;
        g = gn;
    }
    x
}

/// Minimizer of `J` over features already divided by `γ`.
///
/// The result is the literal argmin: local samples sit at negative margin.
pub fn fit_scoring_head<T: Scalar>(
    features_local: &Matrix<T>,
    features_negative: &Matrix<T>,
    lambda: f64,
    opts: SolverOptions,
) -> Result<Vec<T>> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::param("lambda", format!("must be positive, got {lambda}")));
    }
    let design = Design::new(features_local, features_negative)?;
    let w = lbfgs(|w| design.objective(w, lambda), design.dim, opts);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("scoring solver diverged".into()));
    }
    Ok(w.into_iter().map(T::of).collect())
}

/// ℓ2-sensitivity `2 / (λ N)` of the minimizer, `N = n_local + n_negative`.
pub fn sensitivity_bound(lambda: f64, n_local: usize, n_negative: usize) -> f64 {
    2.0 / (lambda * (n_local + n_negative) as f64)
}

/// Gaussian-mechanism variance `8 ln(1.25/δ) / (ε² λ² N²)`.
pub fn compute_sigma_sq(pp: &PrivacyParams, n_local: usize, n_negative: usize) -> Result<f64> {
    pp.validate()?;
    let n = (n_local + n_negative) as f64;
    if n == 0.0 {
        return Err(Error::param("n", "scoring needs at least one sample"));
    }
    Ok(8.0 * (1.25 / pp.delta).ln() / (pp.epsilon.powi(2) * pp.lambda.powi(2) * n * n))
}

/// `weights + N(0, σ² I)` from a seeded stream.
pub fn sanitize_head<T: Scalar>(weights: &[T], sigma_sq: f64, seed: u64) -> Result<Vec<T>> {
    if !(sigma_sq >= 0.0) || !sigma_sq.is_finite() {
        return Err(Error::param(
            "sigma_sq",
            format!("must be non-negative, got {sigma_sq}"),
        ));
    }
    if sigma_sq == 0.0 {
        return Ok(weights.to_vec());
    }
    let sigma = sigma_sq.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(weights
        .iter()
        .map(|&w| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::of(w.as_f64() + sigma * z)
        })
        .collect())
}

/// How the fitted weights are perturbed before release.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sanitization {
    /// Release the exact minimizer.
    Disabled,
    /// Variance from [`compute_sigma_sq`].
    Calibrated { seed: u64 },
    /// Explicit variance override.
    Fixed { sigma_sq: f64, seed: u64 },
}

/// A released scoring head. Scores are `sigmoid(⟨weights, x/γ⟩) + ξ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ScoringHead<T> {
    pub weights: Vec<T>,
    pub gamma: T,
    pub sanitized: bool,
    pub sigma_sq: f64,
    pub xi: f64,
}

impl<T: Scalar> ScoringHead<T> {
    /// An unsanitized head with explicit weights.
    pub fn new(weights: Vec<T>, gamma: T, xi: f64) -> Result<Self> {
        if !(gamma > T::zero()) {
            return Err(Error::param("gamma", format!("must be positive, got {gamma}")));
        }
        Ok(Self {
            weights,
            gamma,
            sanitized: false,
            sigma_sq: 0.0,
            xi,
        })
    }

    /// Client-side preparation: normalize, fit, perturb, flip the sign.
    pub fn fit(
        features_local: &Matrix<T>,
        features_negative: &Matrix<T>,
        pp: &PrivacyParams,
        opts: SolverOptions,
        sanitization: Sanitization,
    ) -> Result<Self> {
        pp.validate()?;
        let gamma = compute_gamma(features_local, features_negative)?;
        let inv = T::one() / gamma;
        let w = fit_scoring_head(
            &features_local.scale(inv),
            &features_negative.scale(inv),
            pp.lambda,
            opts,
        )?;
        let (n_local, n_negative) = (features_local.rows(), features_negative.rows());
        let (w, sanitized, sigma_sq) = match sanitization {
            Sanitization::Disabled => (w, false, 0.0),
            Sanitization::Calibrated { seed } => {
                let s2 = compute_sigma_sq(pp, n_local, n_negative)?;
                (sanitize_head(&w, s2, seed)?, true, s2)
            }
            Sanitization::Fixed { sigma_sq, seed } => (sanitize_head(&w, sigma_sq, seed)?, true, sigma_sq),
        };
        Ok(Self {
            weights: w.into_iter().map(|v| -v).collect(),
            gamma,
            sanitized,
            sigma_sq,
            xi: pp.xi,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Certainty score of every feature row.
    pub fn score(&self, features: &Matrix<T>) -> Result<Vec<T>> {
        if features.cols() != self.weights.len() {
            return Err(Error::dim("scoring features", self.weights.len(), features.cols()));
        }
        let inv = T::one() / self.gamma;
        let xi = T::of(self.xi);
        Ok(features
            .iter_rows()
            .map(|x| {
                let margin = x.iter().zip(&self.weights).map(|(&a, &w)| a * w).sum::<T>() * inv;
                sigmoid(margin) + xi
            })
            .collect())
    }
}

/// Writes `sample_index,client_id,score` rows, clients in the given order.
pub fn write_scores_csv<T: Scalar, W: Write>(scores: &[(usize, Vec<T>)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["sample_index", "client_id", "score"]).map_err(io)?;
    for (client, values) in scores {
        for (i, s) in values.iter().enumerate() {
            w.write_record([i.to_string(), client.to_string(), format!("{}", s.as_f64())])
                .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}
