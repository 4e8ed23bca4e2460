use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index {index} out of range for dimension {dim}")]
    OutOfRange { index: usize, dim: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("refusing to materialize {entries} entries (limit {limit})")]
    MaterializeGuard { entries: u128, limit: u128 },

    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("factorization failed at pivot {pivot} (damping {damping:e}); increase the damping")]
    Factorization { pivot: usize, damping: f64 },

    #[error("divergence at {stage} {step}: {what} is not finite")]
    Divergence {
        stage: &'static str,
        step: usize,
        what: &'static str,
    },

    #[error("fingerprint mismatch: store {stored} vs compressor {expected}")]
    FingerprintMismatch { stored: String, expected: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
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

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::Numerical(_) | Error::Factorization { .. } | Error::Divergence { .. } => 4,
            _ => 3,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
