//! Error type shared by every module of the lab.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    /// Inconsistent shapes, unknown sites, invalid hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller asked for something the operation does not support.
    #[error("usage error: {0}")]
    Usage(String),

    /// A NaN or infinity showed up in a computation.
    #[error("numeric failure at {location}: {detail}")]
    Numeric { location: String, detail: String },

    /// Malformed or tampered on-disk artifact.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// A property check failed.
    #[error("verification failed: {0}")]
    Verification(String),

    /// Broken internal invariant.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn config(msg: impl Into<String>) -> Self {
        LabError::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        LabError::Usage(msg.into())
    }

    pub fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        LabError::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        LabError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code used by the CLI: 2 usage/config, 3 numeric, 4 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Usage(_) | LabError::Format { .. } | LabError::Io { .. } => 2,
            LabError::Numeric { .. } => 3,
            LabError::Verification(_) => 4,
            LabError::Internal(_) => 1,
        }
    }
}
