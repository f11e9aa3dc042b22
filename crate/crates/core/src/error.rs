use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("stale forward trace: model generation {model} but trace was recorded at {trace}")]
    StaleTrace { model: u64, trace: u64 },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("corrupt data in {path}: {message}")]
    CorruptData { path: PathBuf, message: String },

    #[error("training diverged during {phase} at epoch {epoch}: loss {loss}")]
    Diverged {
        phase: String,
        epoch: usize,
        loss: f64,
    },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag used by the CLI and the C API.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Shape(_) => "shape-error",
            Error::InvalidState(_) => "invalid-state",
            Error::StaleTrace { .. } => "stale-trace",
            Error::NonFiniteGradient(_) => "non-finite-gradient",
            Error::Format { .. } => "format-error",
            Error::CorruptData { .. } => "corrupt-data",
            Error::Diverged { .. } => "diverged",
            Error::Config { .. } => "config-error",
            Error::Io { .. } => "io-error",
            Error::Json(_) => "json-error",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
