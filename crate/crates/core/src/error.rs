use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed {format} file: {msg}")]
    Format { format: &'static str, msg: String },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("invalid cloud: {0}")]
    InvalidCloud(String),

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate correspondences: {found} pairs within range, need at least 3")]
    DegenerateCorrespondence { found: usize },

    #[error("degenerate cloud: {0}")]
    DegenerateCloud(String),

    #[error("insufficient overlap: no training pair survived registration")]
    InsufficientOverlap,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("insufficient features: have {have}, need at least {need}")]
    InsufficientFeatures { have: usize, need: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("count mismatch: expected {expected}, got {got}")]
    CountMismatch { expected: usize, got: usize },

    #[error("word id {word} out of range 1..={max}")]
    WordOutOfRange { word: u32, max: usize },

    #[error("image id {0} already indexed")]
    DuplicateImage(u32),

    #[error("ground-truth id {gt} missing from ranking of query {query}")]
    MissingGroundTruth { query: usize, gt: u32 },

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
