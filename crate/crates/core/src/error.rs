use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid keypoints: {0}")]
    InvalidKeypoints(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("facial refinement not applicable: {0}")]
    RefinementInapplicable(String),

    #[error("degenerate face: all facial keypoints coincide")]
    DegenerateFace,

    #[error("schema violation in group `{group}`: {detail}")]
    SchemaViolation { group: String, detail: String },

    #[error("malformed many-hot vector in group `{group}`: {detail}")]
    MalformedVector { group: String, detail: String },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("embedding dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("cannot parse description: {0}")]
    DescriptionParse(String),

    #[error("training diagnostic: {0}")]
    Training(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint stage mismatch: expected `{expected}`, found `{found}`")]
    StageMismatch { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Format { path: path.into(), msg: msg.to_string() }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
