//! Self-supervised pre-training of the feature extractor on unlabeled data.
//!
//! Two objectives are available. Denoising reconstruction corrupts each input
//! with Gaussian noise and trains the extractor plus a throwaway linear decoder
//! to recover the clean input. The contrastive objective feeds two noisy views
//! of every sample through the extractor and applies a normalized-temperature
//! cross-entropy over cosine similarities. Only extractor weights are returned.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{minibatches, Dataset};
use crate::error::{Error, Result};
use crate::model::{Model, ModelPrototype};
use crate::numeric::{Activation, Dense, Matrix, Mlp, OptimizerState};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainObjective {
    DenoisingReconstruction,
    ContrastivePairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub objective: PretrainObjective,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Input corruption for the denoising objective.
    pub noise_sigma: f64,
    /// View perturbation for the contrastive objective.
    pub augmentation_sigma: f64,
    /// Contrastive temperature.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            objective: PretrainObjective::DenoisingReconstruction,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            noise_sigma: 0.1,
            augmentation_sigma: 0.1,
            temperature: 0.5,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be at least 1".into()));
        }
        if self.objective == PretrainObjective::ContrastivePairs && self.batch_size < 2 {
            return Err(Error::Config("contrastive pre-training needs batch_size >= 2".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "pretrain learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.augmentation_sigma >= 0.0) {
            return Err(Error::Config("pretrain noise levels must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "pretrain temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Extractor weights and the mean training loss of every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome<T> {
    pub extractor: Vec<T>,
    pub epoch_losses: Vec<f64>,
}

/// The seeded model whose extractor pre-training starts from.
pub fn pretrain_init<T: Scalar>(prototype: &ModelPrototype, seed: u64) -> Result<Model<T>> {
    Model::seeded(prototype, derive_seed(seed, "pretrain-init", &[]))
}

fn noisy<T: Scalar, R: Rng>(x: &Matrix<T>, sigma: f64, rng: &mut R) -> Matrix<T> {
    let mut out = x.clone();
    if sigma > 0.0 {
        for v in out.as_mut_slice() {
            let z: f64 = StandardNormal.sample(rng);
            *v += T::of(sigma * z);
        }
    }
    out
}

/// Mean squared reconstruction error `1/(B·d) Σ ‖net(noisy) − clean‖²` and its
/// parameter gradient.
pub fn denoising_loss_and_gradient<T: Scalar>(
    net: &Mlp<T>,
    noisy_input: &Matrix<T>,
    clean: &Matrix<T>,
) -> Result<(T, Vec<T>)> {
    let cache = net.forward_cached(noisy_input)?;
    let out = cache.output();
    if out.shape() != clean.shape() {
        return Err(Error::dim("reconstruction target", out.cols(), clean.cols()));
    }
    let scale = T::one() / T::of_usize(out.rows() * out.cols());
    let mut d = Matrix::zeros(out.rows(), out.cols());
    let mut loss = T::zero();
    for ((g, &y), &x) in d.as_mut_slice().iter_mut().zip(out.as_slice()).zip(clean.as_slice()) {
        let r = y - x;
        loss += r * r;
        *g = T::of(2.0) * r * scale;
    }
    let grad = net.backward(&cache, &d)?;
    Ok((loss * scale, grad))
}

/// Cosine-normalized rows; all-zero rows stay zero. Returns the norms as well.
fn normalize_rows<T: Scalar>(z: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let norms = z.row_norms();
    let mut u = z.clone();
    for (r, &n) in norms.iter().enumerate() {
        if n > T::zero() {
            for v in u.row_mut(r) {
                *v /= n;
            }
        }
    }
    (u, norms)
}

/// NT-Xent loss over the `2B` rows of `[a; b]` where row `i` of `a` pairs
/// with row `i` of `b`, plus its gradient with respect to `a` and `b`.
pub fn contrastive_loss_and_gradient<T: Scalar>(
    features_a: &Matrix<T>,
    features_b: &Matrix<T>,
    temperature: T,
) -> Result<(T, Matrix<T>, Matrix<T>)> {
    if features_a.shape() != features_b.shape() {
        return Err(Error::dim("contrastive views", features_a.rows(), features_b.rows()));
    }
    let b = features_a.rows();
    if b < 2 {
        return Err(Error::Argument("contrastive loss needs at least two pairs".into()));
    }
    if !(temperature > T::zero()) {
        return Err(Error::param(
            "temperature",
            format!("must be positive, got {temperature}"),
        ));
    }
    let z = features_a.vstack(features_b)?;
    let (u, norms) = normalize_rows(&z);
    let n = 2 * b;
    let inv_t = T::one() / temperature;
    let sim = u.matmul_t(&u)?.scale(inv_t);
    let partner = |i: usize| if i < b { i + b } else { i - b };

    // g[i][k] = ∂L/∂S_ik, with L the mean over anchors.
    let mut g = Matrix::zeros(n, n);
    let mut loss = T::zero();
    let inv_n = T::one() / T::of_usize(n);
    for i in 0..n {
        let row = sim.row(i);
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| row[k])
            .fold(T::neg_infinity(), T::max);
        let denom: T = (0..n).filter(|&k| k != i).map(|k| (row[k] - max).exp()).sum();
        let lse = denom.ln() + max;
        let p = partner(i);
        loss += lse - row[p];
        for k in (0..n).filter(|&k| k != i) {
            let soft = (row[k] - lse).exp();
            let target = if k == p { T::one() } else { T::zero() };
            g.set(i, k, (soft - target) * inv_n);
        }
    }
    // ∂L/∂u_i = Σ_k (g_ik + g_ki) u_k / τ
    let sym = {
        let mut s = g.clone();
        for i in 0..n {
            for k in 0..n {
                s.set(i, k, g.get(i, k) + g.get(k, i));
            }
        }
        s
    };
    let du = sym.matmul(&u)?.scale(inv_t);
    // ∂L/∂z_i = (I − u_i u_iᵀ) ∂L/∂u_i / ‖z_i‖
    let mut dz = Matrix::zeros(n, z.cols());
    for (i, &norm) in norms.iter().enumerate() {
        if norm > T::zero() {
            let ui = u.row(i);
            let proj: T = ui.iter().zip(du.row(i)).map(|(&a, &c)| a * c).sum();
            for ((o, &d), &uk) in dz.row_mut(i).iter_mut().zip(du.row(i)).zip(ui) {
                *o = (d - proj * uk) / norm;
            }
        }
    }
    let da = dz.select_rows(&(0..b).collect::<Vec<_>>());
    let db = dz.select_rows(&(b..n).collect::<Vec<_>>());
    Ok((loss * inv_n, da, db))
}

pub fn contrastive_loss<T: Scalar>(features_a: &Matrix<T>, features_b: &Matrix<T>, temperature: T) -> Result<T> {
    contrastive_loss_and_gradient(features_a, features_b, temperature).map(|(l, _, _)| l)
}

/// Trains the extractor of `prototype` on the rows of `aux` (labels ignored).
pub fn train_feature_extractor<T: Scalar>(
    prototype: &ModelPrototype,
    aux: &Dataset<T>,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome<T>> {
    cfg.validate()?;
    if aux.is_empty() {
        return Err(Error::Argument("pre-training data is empty".into()));
    }
    if aux.dim() != prototype.input_dim {
        return Err(Error::dim("pre-training input", prototype.input_dim, aux.dim()));
    }
    let init = pretrain_init::<T>(prototype, cfg.seed)?;
    let n_extractor = init.extractor_param_count();
    let mut layers = init.extractor_network().into_layers();
    if cfg.objective == PretrainObjective::DenoisingReconstruction {
        let mut rng = rng_for(cfg.seed, "pretrain-decoder", &[]);
        layers.push(Dense::seeded(
            prototype.feature_dim,
            prototype.input_dim,
            Activation::Identity,
            &mut rng,
        ));
    }
    let mut net = Mlp::new(layers)?;
    let mut opt = OptimizerState::adam(T::of(cfg.learning_rate), net.param_count())?;
    let x = aux.features();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let mut rng = rng_for(cfg.seed, "pretrain-noise", &[e]);
        let mut total = 0.0;
        let mut seen = 0usize;
        for idx in minibatches(
            x.rows(),
            cfg.batch_size,
            derive_seed(cfg.seed, "pretrain-batches", &[e]),
        ) {
            let clean = x.select_rows(&idx);
            let (loss, grad) = match cfg.objective {
                PretrainObjective::DenoisingReconstruction => {
                    let corrupted = noisy(&clean, cfg.noise_sigma, &mut rng);
                    denoising_loss_and_gradient(&net, &corrupted, &clean)?
                }
                PretrainObjective::ContrastivePairs => {
                    if idx.len() < 2 {
                        continue;
                    }
                    let va = noisy(&clean, cfg.augmentation_sigma, &mut rng);
                    let vb = noisy(&clean, cfg.augmentation_sigma, &mut rng);
                    let ca = net.forward_cached(&va)?;
                    let cb = net.forward_cached(&vb)?;
                    let (loss, da, db) =
                        contrastive_loss_and_gradient(ca.output(), cb.output(), T::of(cfg.temperature))?;
                    let mut grad = net.backward(&ca, &da)?;
                    for (g, h) in grad.iter_mut().zip(net.backward(&cb, &db)?) {
                        *g += h;
                    }
                    (loss, grad)
                }
            };
            let mut params = net.params();
            opt.step(&mut params, &grad)?;
            net.set_params(&params)?;
            total += loss.as_f64() * idx.len() as f64;
            seen += idx.len();
        }
        epoch_losses.push(total / seen.max(1) as f64);
    }
    if epoch_losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("pre-training loss diverged".into()));
    }
    let mut extractor = net.params();
    extractor.truncate(n_extractor);
    Ok(PretrainOutcome {
        extractor,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{circle_centers, generate_synthetic, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blobs(n: usize) -> Dataset<f64> {
        let spec = SyntheticSpec::GaussianBlobs {
            centers: circle_centers(4, 3.0),
            std: 0.5,
        };
        generate_synthetic::<f64>(&spec, n, 1).unwrap().without_labels()
    }

    fn proto() -> ModelPrototype {
        ModelPrototype::new("p", 2, vec![8], 6, 4).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train_feature_extractor(&proto(), &blobs(50), &cfg).unwrap();
        assert_eq!(
            out.extractor,
            pretrain_init::<f64>(&proto(), cfg.seed).unwrap().extractor_params()
        );
        assert!(out.epoch_losses.is_empty());
    }

    #[test]
    fn denoising_loss_drops_and_is_deterministic() {
        let cfg = PretrainConfig {
            epochs: 20,
            ..Default::default()
        };
        let data = blobs(500);
        let a = train_feature_extractor(&proto(), &data, &cfg).unwrap();
        assert!(
            a.epoch_losses.last().unwrap() < a.epoch_losses.first().unwrap(),
            "{:?}",
            a.epoch_losses
        );
        let b = train_feature_extractor(&proto(), &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.extractor.len(), proto().extractor_param_count());
    }

    #[test]
    fn contrastive_training_is_deterministic_and_non_degenerate() {
        let cfg = PretrainConfig {
            objective: PretrainObjective::ContrastivePairs,
            epochs: 10,
            batch_size: 32,
            augmentation_sigma: 0.3,
            ..Default::default()
        };
        let data = blobs(300);
        let a = train_feature_extractor(&proto(), &data, &cfg).unwrap();
        assert_eq!(a, train_feature_extractor(&proto(), &data, &cfg).unwrap());
        let mut model = pretrain_init::<f64>(&proto(), 0).unwrap();
        model.set_extractor_params(&a.extractor).unwrap();
        let f = model.features(data.features()).unwrap();
        let live = (0..f.cols())
            .filter(|&j| {
                let col: Vec<f64> = f.iter_rows().map(|r| r[j]).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() > 0.0
            })
            .count();
        assert!(2 * live >= f.cols(), "{live} live feature dims");
    }

    #[test]
    fn contrastive_needs_pairs() {
        let cfg = PretrainConfig {
            objective: PretrainObjective::ContrastivePairs,
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(
            train_feature_extractor(&proto(), &blobs(10), &cfg),
            Err(Error::Config(_))
        ));
        let one = Matrix::from_f64_rows(&[&[1.0, 0.0]]);
        assert!(matches!(contrastive_loss(&one, &one, 0.5), Err(Error::Argument(_))));
    }

    #[test]
    fn contrastive_hand_evaluation() {
        // Two pairs, identical unit positives, orthogonal across pairs. Each
        // anchor sees its positive at cos 1 and two negatives at cos 0:
        // ℓ = −ln(e^{1/τ} / (e^{1/τ} + 2)).
        let a = Matrix::from_f64_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let t: f64 = 0.5;
        let expected = -((1.0 / t).exp() / ((1.0 / t).exp() + 2.0)).ln();
        let l = contrastive_loss(&a, &a, t).unwrap();
        assert!((l - expected).abs() < 1e-12);
        // Mismatched pairing is worse.
        let swapped = Matrix::from_f64_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(l < contrastive_loss(&a, &swapped, t).unwrap());
    }

    #[test]
    fn contrastive_hand_table_batch_of_four() {
        // Hand-built 2-D features with cosine table computed from angles.
        let angles_a = [0.0f64, 0.5, 1.7, 3.0];
        let angles_b = [0.2f64, 0.4, 2.0, 2.6];
        let unit = |t: f64| [t.cos(), t.sin()];
        let rows_a: Vec<[f64; 2]> = angles_a.iter().map(|&t| unit(t)).collect();
        let rows_b: Vec<[f64; 2]> = angles_b.iter().map(|&t| unit(t)).collect();
        let a = Matrix::from_rows(&rows_a).unwrap();
        let b = Matrix::from_rows(&rows_b).unwrap();
        let tau = 0.7;
        let all: Vec<f64> = angles_a.iter().chain(&angles_b).copied().collect();
        let mut expected = 0.0;
        for i in 0..8 {
            let p = (i + 4) % 8;
            let cos = |k: usize| (all[i] - all[k]).cos();
            let denom: f64 = (0..8).filter(|&k| k != i).map(|k| (cos(k) / tau).exp()).sum();
            expected += -((cos(p) / tau).exp() / denom).ln();
        }
        expected /= 8.0;
        let l = contrastive_loss(&a, &b, tau).unwrap();
        assert!((l - expected).abs() < 1e-6, "{l} vs {expected}");
        assert!((contrastive_loss(&b, &a, tau).unwrap() - l).abs() < 1e-12);
        assert!((contrastive_loss(&a.scale(3.5), &b.scale(0.2), tau).unwrap() - l).abs() < 1e-12);
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-5;
        for i in 0..x.len() {
            let (mut up, mut down) = (x.to_vec(), x.to_vec());
            up[i] += h;
            down[i] -= h;
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!((fd - grad[i]).abs() / denom < 1e-4, "coord {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn contrastive_feature_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (_, da, db) = contrastive_loss_and_gradient(&a, &b, 0.5).unwrap();
        let mut x = a.as_slice().to_vec();
        x.extend_from_slice(b.as_slice());
        let mut g = da.as_slice().to_vec();
        g.extend_from_slice(db.as_slice());
        let f = |v: &[f64]| {
            let a = Matrix::from_vec(3, 4, v[..12].to_vec()).unwrap();
            let b = Matrix::from_vec(3, 4, v[12..].to_vec()).unwrap();
            contrastive_loss(&a, &b, 0.5).unwrap()
        };
        fd_check(f, &x, &g);
    }

    #[test]
    fn denoising_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::<f64>::seeded(&[3, 5, 3], &[Activation::Relu, Activation::Identity], &mut rng).unwrap();
        let clean = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let corrupted = noisy(&clean, 0.2, &mut rng);
        let (_, grad) = denoising_loss_and_gradient(&net, &corrupted, &clean).unwrap();
        let f = |p: &[f64]| {
            let mut n = net.clone();
            n.set_params(p).unwrap();
            denoising_loss_and_gradient(&n, &corrupted, &clean).unwrap().0
        };
        fd_check(f, &net.params(), &grad);
    }
}
