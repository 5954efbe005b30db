use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("segment too short: {samples} samples, need at least {window}")]
    SegmentTooShort { samples: usize, window: usize },

    #[error("segment too short for front-end: {frames} frames, kernel is {kernel}")]
    FrontEndTooShort { frames: usize, kernel: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("semantic lexicon has inconsistent dimensions: expected {expected}, found {found} for {word:?}")]
    SemanticDim { expected: usize, found: usize, word: String },

    #[error("split {0} is empty")]
    EmptySplit(String),

    #[error("no positive pairs: {0}")]
    NoPositivePairs(String),

    #[error("batch contains a single word type; no negatives available")]
    SingleWordType,

    #[error("zero-norm vector has no cosine distance")]
    ZeroVector,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("wav decode: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
