use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sample {0} has an empty candidate set")]
    EmptyCandidateRow(usize),

    #[error("class prior has no mass on any class")]
    AllZeroPrior,

    #[error("row {0} has zero sum and cannot be normalized")]
    ZeroRowSum(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("pseudo label ({0}, {1}) is not strictly positive on the candidate support")]
    NonPositiveWeightOnSupport(usize, usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("prior estimator is configured for rule {expected}, not {got}")]
    RuleMismatch { expected: &'static str, got: &'static str },

    #[error("benchmark needs at least 3 repetitions, got {0}")]
    TooFewReps(usize),

    #[error("non-finite loss at stage {stage}, epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        stage: usize,
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("{path}: line {line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidValue(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for errors caused by numerics rather than usage or IO.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
