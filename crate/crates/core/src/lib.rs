//! Deterministic simulator for federated learning with unlabeled auxiliary data.
//!
//! Implements parameter-averaging baselines (FedAVG, FedPROX), ensemble
//! distillation over auxiliary data (FedDF) and its certainty-weighted,
//! differentially private variant with self-supervised pre-training (FedAUX).
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64` and
//! `*32` aliases below name the concrete instantiations.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod data;
pub mod distill;
mod error;
pub mod federation;
pub mod model;
pub mod numeric;
pub mod pretrain;
mod scalar;
pub mod scoring;
pub mod seed;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = numeric::Matrix<f64>;
pub type Matrix32 = numeric::Matrix<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type ScoringHead64 = scoring::ScoringHead<f64>;
pub type ScoringHead32 = scoring::ScoringHead<f32>;
pub type SoftLabelBatch64 = aggregate::SoftLabelBatch<f64>;
pub type SoftLabelBatch32 = aggregate::SoftLabelBatch<f32>;
