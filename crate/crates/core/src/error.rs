use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("data stream exhausted at step {step} of {total_steps}")]
    StreamExhausted { step: u64, total_steps: u64 },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("unsupported version {found} in {path} (supported: {supported})")]
    UnsupportedVersion { path: PathBuf, found: u32, supported: u32 },

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated payload in {path}: expected {expected} bytes, found {actual}")]
    TruncatedPayload { path: PathBuf, expected: u64, actual: u64 },

    #[error("row {row}: {detail}")]
    RowShape { row: u64, detail: String },

    #[error("header mismatch across shards: {0}")]
    HeaderMismatch(String),

    #[error("metadata misaligned with rows: {0}")]
    Misaligned(String),

    #[error("invalid feature id {feature} (coder has {n_features} features)")]
    InvalidFeature { feature: usize, n_features: usize },

    #[error("side mismatch: {0}")]
    SideMismatch(String),

    #[error("infeasible planted world: {0}")]
    Infeasible(String),

    #[error("no target-token occurrences: {0}")]
    NoOccurrences(String),

    #[error("tokens outside the sampled stream: {0}")]
    OutsideStream(String),

    #[error("adapter does not support generation")]
    GenerationUnsupported,

    #[error("PCA: {0}")]
    Pca(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
