use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A loss or gradient evaluation produced a non-finite value.
    #[error("numerical failure: {message} (iterate norm {iterate_norm:e})")]
    NumericalFailure {
        message: String,
        iterate: Vec<f64>,
        iterate_norm: f64,
    },

    #[error("worker {worker} failed: {source}")]
    Worker {
        worker: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {kind}")]
    Idx { path: PathBuf, kind: IdxError },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Parse failures for IDX containers, each naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdxError {
    #[error("truncated header")]
    TruncatedHeader,
    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("zero-sized dimension `{0}`")]
    EmptyDimension(&'static str),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>, iterate: &[f64]) -> Self {
        let iterate_norm = iterate.iter().map(|x| x * x).sum::<f64>().sqrt();
        Error::NumericalFailure {
            message: msg.into(),
            iterate: iterate.to_vec(),
            iterate_norm,
        }
    }
}
