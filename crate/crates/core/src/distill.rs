//! Server-side student distillation against aggregated soft labels.

use serde::{Deserialize, Serialize};

use crate::aggregate::SoftLabelBatch;
use crate::data::minibatches;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{LossKind, Matrix, OptimizerKind, OptimizerState};
use crate::scalar::Scalar;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Softmax temperature applied to the student; teachers are built with the same value.
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 64,
            learning_rate: 5e-5,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            temperature: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param(
                "learning_rate",
                format!("must be non-negative, got {}", self.learning_rate),
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::param(
                "temperature",
                format!("must be positive, got {}", self.temperature),
            ));
        }
        Ok(())
    }
}

/// One optimizer step on `KL(teacher ‖ softmax(student(batch)/τ))`.
///
/// Updates `student` in place and returns the loss before the step.
pub fn distill_step<T: Scalar>(
    student: &mut Model<T>,
    batch: &Matrix<T>,
    teacher: &Matrix<T>,
    opt: &mut OptimizerState<T>,
    temperature: T,
) -> Result<T> {
    let (loss, grad) = student.loss_and_gradient(batch, teacher, LossKind::Kl { temperature })?;
    let mut params = student.params();
    opt.step(&mut params, &grad)?;
    student.set_params(&params)?;
    Ok(loss)
}

/// Mean KL loss of every epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistillReport {
    pub epoch_losses: Vec<f64>,
}

impl DistillReport {
    pub fn mean_loss(&self) -> Option<f64> {
        if self.epoch_losses.is_empty() {
            None
        } else {
            Some(self.epoch_losses.iter().sum::<f64>() / self.epoch_losses.len() as f64)
        }
    }
}

/// `cfg.epochs` passes over `distill_data` in seeded mini-batch order, with a
/// fresh optimizer state.
pub fn distill<T: Scalar>(
    student: &mut Model<T>,
    distill_data: &Matrix<T>,
    teacher: &SoftLabelBatch<T>,
    cfg: &DistillConfig,
) -> Result<DistillReport> {
    cfg.validate()?;
    if teacher.len() != distill_data.rows() {
        return Err(Error::dim("teacher rows", distill_data.rows(), teacher.len()));
    }
    let mut opt = OptimizerState::new(cfg.optimizer, T::of(cfg.learning_rate), student.param_count())?;
    let temperature = T::of(cfg.temperature);
    let mut report = DistillReport::default();
    for epoch in 0..cfg.epochs {
        let batches = minibatches(
            distill_data.rows(),
            cfg.batch_size,
            derive_seed(cfg.seed, "distill", &[epoch as u64]),
        );
        let mut total = 0.0;
        for idx in &batches {
            let loss = distill_step(
                student,
                &distill_data.select_rows(idx),
                &teacher.select(idx),
                &mut opt,
                temperature,
            )?;
            total += loss.as_f64() * idx.len() as f64;
        }
        report.epoch_losses.push(total / distill_data.rows().max(1) as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelPrototype;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Model<f64>, Matrix<f64>) {
        let proto = ModelPrototype::new("p", 2, vec![], 6, 3).unwrap();
        let model = Model::seeded(&proto, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_vec(40, 2, (0..80).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        (model, x)
    }

    fn other_teacher(x: &Matrix<f64>) -> SoftLabelBatch<f64> {
        let (teacher_model, _) = setup(99);
        SoftLabelBatch::from_logits(&teacher_model.logits(x).unwrap().scale(3.0), 1.0).unwrap()
    }

    #[test]
    fn own_softmax_is_a_fixed_point() {
        let (model, x) = setup(1);
        let teacher = SoftLabelBatch::from_logits(&model.logits(&x).unwrap(), 1.0).unwrap();
        let mut student = model.clone();
        let cfg = DistillConfig {
            epochs: 3,
            batch_size: 7,
            learning_rate: 1e-2,
            ..Default::default()
        };
        distill(&mut student, &x, &teacher, &cfg).unwrap();
        for (a, b) in student.params().iter().zip(model.params()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn step_descends_on_mismatched_teacher() {
        let (mut student, x) = setup(2);
        let teacher = other_teacher(&x);
        let t = teacher.probabilities().clone();
        let mut opt = OptimizerState::sgd(1e-3, student.param_count()).unwrap();
        let before = distill_step(&mut student, &x, &t, &mut opt, 1.0).unwrap();
        let (after, _) = student
            .loss_and_gradient(&x, &t, LossKind::Kl { temperature: 1.0 })
            .unwrap();
        assert!(after <= before, "{after} > {before}");
        assert!(before > 0.0);
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let (model, x) = setup(3);
        let teacher = other_teacher(&x);
        let mut untouched = model.clone();
        let cfg0 = DistillConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(distill(&mut untouched, &x, &teacher, &cfg0)
            .unwrap()
            .epoch_losses
            .is_empty());
        assert_eq!(untouched, model);

        let cfg = DistillConfig {
            epochs: 2,
            batch_size: 8,
            seed: 5,
            ..Default::default()
        };
        let (mut a, mut b) = (model.clone(), model.clone());
        distill(&mut a, &x, &teacher, &cfg).unwrap();
        distill(&mut b, &x, &teacher, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn epoch_loss_decreases() {
        let (mut student, x) = setup(4);
        let teacher = other_teacher(&x);
        let cfg = DistillConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let report = distill(&mut student, &x, &teacher, &cfg).unwrap();
        assert!(
            report.epoch_losses[1] < report.epoch_losses[0],
            "{:?}",
            report.epoch_losses
        );
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let (student, x) = setup(5);
        let x = x.select_rows(&[0, 1, 2, 3]);
        let teacher = other_teacher(&x).probabilities().clone();
        let loss = |p: &[f64]| {
            let mut m = student.clone();
            m.set_params(p).unwrap();
            m.loss_and_gradient(&x, &teacher, LossKind::Kl { temperature: 1.0 })
                .unwrap()
                .0
        };
        let (_, grad) = student
            .loss_and_gradient(&x, &teacher, LossKind::Kl { temperature: 1.0 })
            .unwrap();
        let p = student.params();
        let h = 1e-5;
        for i in 0..p.len() {
            let (mut up, mut down) = (p.clone(), p.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (loss(&up) - loss(&down)) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!((fd - grad[i]).abs() / denom < 1e-4, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn mismatched_teacher_is_rejected() {
        let (mut student, x) = setup(6);
        let teacher = other_teacher(&x.select_rows(&[0, 1]));
        assert!(matches!(
            distill(&mut student, &x, &teacher, &DistillConfig::default()),
            Err(Error::Dimension { .. })
        ));
    }
}
