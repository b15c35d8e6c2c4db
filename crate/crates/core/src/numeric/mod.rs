//! Dense linear algebra, activations, losses and optimizers.

mod functions;
mod matrix;
mod mlp;
mod optim;

pub use functions::{kl_divergence, sigmoid, softmax, softmax_rows, softplus, KL_Q_FLOOR};
pub use matrix::{dot, norm, Matrix};
pub use mlp::{mlp_forward_backward, Activation, Dense, ForwardCache, LossKind, Mlp};
pub use optim::{OptimizerKind, OptimizerState};
