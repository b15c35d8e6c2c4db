use thiserror::Error;

/// Errors raised by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("KL divergence undefined: q[{index}] = 0 where p[{index}] > 0")]
    Divergence { index: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("prototype mismatch: expected `{expected}`, got `{actual}`")]
    Prototype { expected: String, actual: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("certainty score must be strictly positive, got {value} (client {client}, sample {sample})")]
    Score { client: usize, sample: usize, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("client {client}: {reason}")]
    Client { client: usize, reason: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}
