use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad error classes, used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Config,
    Io,
    ModelMismatch,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("input contains non-finite values")]
    NonFinite,

    #[error("mask is empty")]
    EmptyMask,

    #[error("zero intensity variance over the brain mask")]
    ZeroVariance,

    #[error("slice is not normalized: {0}")]
    NotNormalized(String),

    #[error("model kind mismatch: expected {expected}, found {found}")]
    ModelKind {
        expected: &'static str,
        found: &'static str,
    },

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("refinement has already terminated")]
    Terminated,

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } | Error::Corrupt { .. } => ErrorCategory::Io,
            Error::ModelKind { .. } | Error::ModelMismatch(_) => ErrorCategory::ModelMismatch,
            Error::Config(_) => ErrorCategory::Config,
            Error::Internal(_) => ErrorCategory::Internal,
            _ => ErrorCategory::Validation,
        }
    }
}

pub(crate) fn check_dims(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
