use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {message}")]
    ImageParse { path: PathBuf, message: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures specific to reading or validating a checkpoint pair.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("truncated blob: manifest expects {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("shape mismatch for tensor \"{name}\": checkpoint has {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor \"{0}\"")]
    MissingTensor(String),

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("non-finite value in tensor \"{0}\"")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
