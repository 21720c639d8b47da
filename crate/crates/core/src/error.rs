use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ReconError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("disconnected graph: {count} vertices unreachable from the fixed vertex")]
    Disconnected { count: usize, unreachable: Vec<usize> },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ReconError {
    /// Short machine-parseable category, used as the CLI error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            ReconError::DimensionMismatch(_) => "dimension",
            ReconError::InvalidInput(_) => "invalid-input",
            ReconError::Degenerate(_) => "degenerate",
            ReconError::Empty(_) => "empty",
            ReconError::Disconnected { .. } => "disconnected",
            ReconError::Format { .. } => "format",
            ReconError::Config(_) => "config",
            ReconError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ReconError::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        ReconError::Format { path: path.into(), reason: reason.into() }
    }
}
