//! Crate-wide error types.

use thiserror::Error;

/// Errors from tensor construction and graph execution.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("reference values not computed; run a reference forward pass first")]
    MissingReference,
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of bounds for axis of size {size} in {op}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
}

/// Errors raised by the higher-level pipeline stages.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("token id {token} outside embedding table of size {size}")]
    TokenOutOfRange { token: usize, size: usize },
    #[error("{path}:{line}: malformed record: {detail}")]
    MalformedRecord {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("single-class input: simulator training needs both classes")]
    SingleClass,
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    BadCheckpointVersion { found: u32, expected: u32 },
}

pub type CoreResult<T> = Result<T, CoreError>;
