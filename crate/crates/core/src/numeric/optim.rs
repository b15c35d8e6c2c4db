use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer hyperparameters plus the per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    kind: OptimizerKind,
    learning_rate: T,
    beta1: T,
    beta2: T,
    eps: T,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    step_count: u64,
}

impl<T: Scalar> OptimizerState<T> {
    /// A learning rate of zero is accepted and leaves parameters untouched.
    pub fn new(kind: OptimizerKind, learning_rate: T, dim: usize) -> Result<Self> {
        if !(learning_rate >= T::zero()) || !learning_rate.is_finite() {
            return Err(Error::param(
                "learning_rate",
                format!("must be finite and non-negative, got {learning_rate}"),
            ));
        }
        let (first_moment, second_moment) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![T::zero(); dim], vec![T::zero(); dim]),
        };
        Ok(Self {
            kind,
            learning_rate,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            first_moment,
            second_moment,
            step_count: 0,
        })
    }

    pub fn sgd(learning_rate: T, dim: usize) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate, dim)
    }

    pub fn adam(learning_rate: T, dim: usize) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate, dim)
    }

    pub fn with_betas(mut self, beta1: T, beta2: T, eps: T) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.eps = eps;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> T {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to `params` in place.
    ///
    /// SGD: `θ ← θ − η·g`. Adam: bias-corrected first/second moment update.
    pub fn step(&mut self, params: &mut [T], gradient: &[T]) -> Result<()> {
        if params.len() != gradient.len() {
            return Err(Error::dim("optimizer gradient", params.len(), gradient.len()));
        }
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(gradient) {
                    *p -= self.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != params.len() {
                    return Err(Error::dim("optimizer moments", self.first_moment.len(), params.len()));
                }
                let t = self.step_count as i32;
                let c1 = T::one() - self.beta1.powi(t);
                let c2 = T::one() - self.beta2.powi(t);
                for (((p, &g), m), v) in params
                    .iter_mut()
                    .zip(gradient)
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    *m = self.beta1 * *m + (T::one() - self.beta1) * g;
                    *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}
