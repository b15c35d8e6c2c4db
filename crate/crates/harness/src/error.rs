use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid config file: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("toy spec error: {0}")]
    Spec(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] auxdistill::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for anything the user can fix in the config or arguments, 3 for
    /// failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Toml(_) | Self::Argument(_) | Self::Spec(_) => 2,
            Self::Core(auxdistill::Error::Config(_) | auxdistill::Error::Parameter { .. }) => 2,
            _ => 3,
        }
    }

    /// Short machine-readable category for the structured error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) | Self::Toml(_) => "config",
            Self::Argument(_) => "argument",
            Self::Spec(_) => "spec",
            Self::Io { .. } | Self::Csv(_) | Self::Json(_) => "io",
            Self::Core(auxdistill::Error::Config(_) | auxdistill::Error::Parameter { .. }) => "config",
            Self::Core(_) => "runtime",
        }
    }
}
