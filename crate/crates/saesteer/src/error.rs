//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by any saesteer operation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported container version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("unsupported dtype tag {0} (only f32 = 0 is defined)")]
    UnsupportedDtype(u8),

    #[error("payload truncated: expected {expected} bytes after header, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("dimension mismatch: header declares {declared} rows, body holds {actual}")]
    DimensionMismatch { declared: u64, actual: u64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("embedding matrix has {matrix_rows} rows but vocabulary has {vocab_lines} tokens")]
    CountMismatch {
        matrix_rows: usize,
        vocab_lines: usize,
    },

    #[error("duplicate vocabulary token {token:?}")]
    DuplicateToken { token: String },

    #[error("vocabulary is empty after filtering")]
    EmptyVocab,

    #[error("feature index {id} out of range (model has {limit} features)")]
    UnknownFeature { id: usize, limit: usize },

    #[error("no features carry label {label:?}")]
    EmptySelection { label: String },

    #[error("unknown topic id {0}")]
    UnknownTopic(usize),

    #[error("training loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("document carries no discourse trajectory")]
    MissingTrajectory,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("json error: {0}")]
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

pub type Result<T> = std::result::Result<T, Error>;
