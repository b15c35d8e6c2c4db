//! Experiment harness for the `auxdistill` simulator: TOML run
//! configuration, JSONL metrics, the nearest-neighbor privacy audit, the
//! score/density agreement report and a small weighted-ensemble toy.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod config;
pub mod density;
mod error;
pub mod run;
pub mod toy;

pub use error::{HarnessError, Result};
