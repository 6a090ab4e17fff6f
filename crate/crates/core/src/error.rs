use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

/// Errors surfaced by the registration library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {source}")]
    Header {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: expected {expected} bytes of raw data, found {actual}")]
    RawSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dims(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("training diverged at iteration {iteration}: loss is {value}")]
    Diverged { iteration: usize, value: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
