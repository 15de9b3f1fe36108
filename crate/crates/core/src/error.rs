use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no ratings")]
    NoRatings,

    #[error("malformed line {line}: {text:?}")]
    MalformedLine { line: usize, text: String },

    #[error("rating {rating} outside [0, {k_max}]")]
    RatingOutOfRange { rating: f64, k_max: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{kind} index {index} out of bounds (size {size})")]
    IndexOutOfBounds {
        kind: &'static str,
        index: usize,
        size: usize,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("line search failed after {evals} evaluations")]
    LineSearchFailed { evals: usize },

    #[error("model vocabulary does not match dataset: {0}")]
    VocabMismatch(String),

    #[error("unsupported model file version {found:?} (expected {expected})")]
    Version { found: String, expected: u32 },

    #[error("model file shape mismatch: {0}")]
    Shape(String),

    #[error("model file format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("{}: {source}", path.display())]
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

    /// Process exit code: 1 usage, 2 data, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Io { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
