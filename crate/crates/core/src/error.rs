use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every typed failure the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unsupported scheme: {0}")]
    UnsupportedScheme(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} at position {position} is outside the vocabulary (size {vocab_size})")]
    TokenOutOfRange {
        token: u32,
        position: usize,
        vocab_size: usize,
    },
    #[error("sequence of length {len} is outside 1..={max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("index out of bounds: {0}")]
    IndexOutOfBounds(String),
    #[error("activation cache missing: forward was run without capture")]
    CacheMissing,
    #[error("invalid site: {0}")]
    InvalidSite(String),
    #[error("invalid intervention plan: {0}")]
    InvalidPlan(String),
    #[error("clean and corrupted sequences differ in length ({clean} vs {corrupted})")]
    LengthMismatch { clean: usize, corrupted: usize },
    #[error("layer order violation: {0}")]
    LayerOrderViolation(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset mixes task/lang/variant: {0}")]
    MixedDataset(String),
    #[error("example `{0}` lacks corrupted tokens (no minimal pair available)")]
    MissingCorrupted(String),
    #[error("invalid example `{id}`: {reason}")]
    InvalidExample { id: String, reason: String },
    #[error("example sets differ: {0}")]
    ExampleMismatch(String),
    #[error("correlation undefined: both inputs are constant")]
    ConstantInput,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unsupported format `{0}`")]
    UnsupportedFormat(String),
    #[error("invalid threshold {0}")]
    InvalidThreshold(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("safetensors: {0}")]
    Safetensors(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
