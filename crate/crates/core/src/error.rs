use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the model, sampler and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix of size {size} is not positive definite even with jitter {max_jitter:e}")]
    Singular { size: usize, max_jitter: f64 },

    #[error("elliptical slice sampler exceeded {max_shrinks} bracket shrinks in {context}")]
    ShrinkLimit {
        max_shrinks: usize,
        context: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Data {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("chain archive {path}: {message}")]
    Archive { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for failures of the numerical machinery (factorization, slice
    /// sampler guard) as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Singular { .. } | Error::ShrinkLimit { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
