use std::path::PathBuf;

use tensornet::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: duplicate token {token:?}")]
    DuplicateToken { token: String, line: usize },

    #[error("embedding row {index} ({token:?}) has zero norm")]
    DegenerateEmbedding { index: usize, token: String },

    #[error("gloss {0:?} is not in the lexicon")]
    UnknownGloss(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty keypoint sequence")]
    EmptySequence,

    #[error("infeasible dataset spec: {0}")]
    Spec(String),

    #[error("clip needs {needed} frames but the sample has {available}")]
    Length { needed: usize, available: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("crop error: {0}")]
    Crop(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (samples {samples:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        samples: Vec<String>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Self::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code: 2 config/parse, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::DuplicateToken { .. }
            | Error::InvalidVocabulary(_)
            | Error::InvalidTemperature(_)
            | Error::InvalidParameter(_)
            | Error::Spec(_)
            | Error::Config(_)
            | Error::Format { .. } => 2,
            Error::DegenerateEmbedding { .. }
            | Error::UnknownGloss(_)
            | Error::Shape(_)
            | Error::EmptySequence
            | Error::Length { .. }
            | Error::Crop(_)
            | Error::Data(_)
            | Error::Io { .. } => 3,
            Error::Tensor(TensorError::Format(_)) => 3,
            Error::Tensor(_) => 2,
            Error::NonFiniteLoss { .. } | Error::Numerical(_) => 4,
        }
    }
}
