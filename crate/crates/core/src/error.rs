use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the model, the training harness or the
/// on-disk formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("capacity error: sequence of length {len} exceeds positional table of {max_len}")]
    Capacity { len: usize, max_len: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite loss at step {step}: {value}")]
    Divergence { step: usize, value: f64 },

    #[error("ingest error in {}: {detail}", path.display())]
    Ingest { path: PathBuf, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Ingest {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
