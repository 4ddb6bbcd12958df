use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {what} (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("coordinate out of range: lat={lat}, lon={lon}")]
    Coordinate { lat: f64, lon: f64 },

    #[error("non-finite loss {loss} at user {user}, step {step}")]
    NonFiniteLoss { loss: f64, user: usize, step: usize },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("vocabulary size mismatch for {what}: checkpoint has {checkpoint}, dataset has {dataset}")]
    VocabMismatch {
        what: &'static str,
        checkpoint: usize,
        dataset: usize,
    },

    #[error("malformed dataset file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
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
}

pub type Result<T> = std::result::Result<T, Error>;
