//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("record {id}: feature length {got} does not match dataset dimension {expected}")]
    FeatureDimMismatch {
        id: String,
        expected: usize,
        got: usize,
    },

    #[error("record {id}: duplicate image id")]
    DuplicateId { id: String },

    #[error("record {id}: status `{status}` violates the train-split protocol (regular/other only)")]
    TrainSplitStatus { id: String, status: String },

    #[error("record {id}: {what} missing")]
    Missing { id: String, what: &'static str },

    #[error("no {side} images in the train split")]
    EmptyTrainSide { side: &'static str },

    #[error("empty proposal set")]
    EmptySet,

    #[error("Gram matrix not factorizable; final jitter tried: {jitter:.3e}")]
    Cholesky { jitter: f64 },

    #[error("predictive covariance not factorizable")]
    PredictiveCovariance,

    #[error("no positive labels in ranking input")]
    NoPositives,

    #[error("ranking input contains a single class only")]
    SingleClass,

    #[error("no score for test image {id}")]
    ScoreMissing { id: String },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by the CLI to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::Parse { .. }
            | Error::FeatureDimMismatch { .. }
            | Error::DuplicateId { .. }
            | Error::TrainSplitStatus { .. }
            | Error::Missing { .. }
            | Error::ScoreMissing { .. }
            | Error::ModelFormat(_) => ErrorClass::Data,
            Error::EmptyTrainSide { .. }
            | Error::EmptySet
            | Error::NoPositives
            | Error::SingleClass => ErrorClass::Protocol,
            Error::Cholesky { .. } | Error::PredictiveCovariance => ErrorClass::Numerics,
            Error::Stage { source, .. } => source.class(),
        }
    }
}

/// Error families with distinct CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Data,
    Protocol,
    Numerics,
}

pub type Result<T> = std::result::Result<T, Error>;
