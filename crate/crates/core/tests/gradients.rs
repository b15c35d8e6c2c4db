//! Analytic gradients of every training loss against central differences on
//! random networks, inputs and targets.

use auxdistill::model::{Model, ModelPrototype};
use auxdistill::numeric::{LossKind, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DRAWS: usize = 50;

struct Draw {
    model: Model<f64>,
    batch: Matrix<f64>,
    onehot: Matrix<f64>,
    soft: Matrix<f64>,
    anchor: Vec<f64>,
}

fn draw(seed: u64) -> Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..5);
    let hidden = (0..rng.random_range(0..3)).map(|_| rng.random_range(2..6)).collect();
    let k = rng.random_range(2..5);
    let proto = ModelPrototype::new("fd", d, hidden, rng.random_range(2..6), k).unwrap();
    let mut model = Model::seeded(&proto, rng.random()).unwrap();
    // Biases start at zero, which can leave later pre-activations exactly on
    // the ReLU kink where finite differences are meaningless.
    let jittered: Vec<f64> = model.params().iter().map(|p| p + rng.random_range(-0.3..0.3)).collect();
    model.set_params(&jittered).unwrap();
    let b = rng.random_range(1..6);
    let batch = Matrix::from_vec(b, d, (0..b * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let mut onehot = Matrix::zeros(b, k);
    let mut soft = Matrix::zeros(b, k);
    for r in 0..b {
        onehot.set(r, rng.random_range(0..k), 1.0);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        for (j, v) in raw.iter().enumerate() {
            soft.set(r, j, v / total);
        }
    }
    let anchor = model.params().iter().map(|p| p + rng.random_range(-0.5..0.5)).collect();
    Draw {
        model,
        batch,
        onehot,
        soft,
        anchor,
    }
}

/// `‖g − fd‖ / max(‖g‖, ‖fd‖, 1e-8)` over the whole parameter vector.
fn relative_error(model: &Model<f64>, batch: &Matrix<f64>, target: &Matrix<f64>, loss: LossKind<f64>) -> f64 {
    let (_, grad) = model.loss_and_gradient(batch, target, loss).unwrap();
    let p = model.params();
    let h = 1e-6;
    let mut probe = model.clone();
    let mut eval = |params: &[f64]| {
        probe.set_params(params).unwrap();
        probe.loss_and_gradient(batch, target, loss).unwrap().0
    };
    let fd: Vec<f64> = (0..p.len())
        .map(|i| {
            let (mut up, mut down) = (p.clone(), p.clone());
            up[i] += h;
            down[i] -= h;
            (eval(&up) - eval(&down)) / (2.0 * h)
        })
        .collect();
    let diff = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale(&grad).max(scale(&fd)).max(1e-8)
}

#[test]
fn cross_entropy_gradient() {
    for seed in 0..DRAWS as u64 {
        let d = draw(seed);
        let err = relative_error(&d.model, &d.batch, &d.onehot, LossKind::CrossEntropy);
        assert!(err < 1e-4, "draw {seed}: relative error {err}");
    }
}

#[test]
fn kl_gradient_at_several_temperatures() {
    for seed in 0..DRAWS as u64 {
        let d = draw(1000 + seed);
        let temperature = [0.5, 1.0, 3.0][seed as usize % 3];
        let err = relative_error(&d.model, &d.batch, &d.soft, LossKind::Kl { temperature });
        assert!(err < 1e-4, "draw {seed}: relative error {err}");
    }
}

#[test]
fn proximal_gradient() {
    for seed in 0..DRAWS as u64 {
        let d = draw(2000 + seed);
        let mu = [0.01, 0.5, 5.0][seed as usize % 3];
        let err = relative_error(
            &d.model,
            &d.batch,
            &d.onehot,
            LossKind::Proximal { mu, anchor: &d.anchor },
        );
        assert!(err < 1e-4, "draw {seed}: relative error {err}");
    }
}

#[test]
fn proximal_term_adds_exactly_mu_times_displacement() {
    let d = draw(7);
    let mu = 0.3;
    let (ce, g_ce) = d
        .model
        .loss_and_gradient(&d.batch, &d.onehot, LossKind::CrossEntropy)
        .unwrap();
    let (prox, g_prox) = d
        .model
        .loss_and_gradient(&d.batch, &d.onehot, LossKind::Proximal { mu, anchor: &d.anchor })
        .unwrap();
    let p = d.model.params();
    let sq: f64 = p.iter().zip(&d.anchor).map(|(a, b)| (a - b).powi(2)).sum();
    assert!((prox - ce - 0.5 * mu * sq).abs() < 1e-12);
    for i in 0..p.len() {
        assert!((g_prox[i] - g_ce[i] - mu * (p[i] - d.anchor[i])).abs() < 1e-12);
    }
}
