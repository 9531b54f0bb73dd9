use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("unsupported or malformed wav data: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-invertible frame: overlap-add denominator {value:e} at offset {offset}")]
    NonInvertibleFrame { offset: usize, value: f64 },

    #[error("singular matrix (condition estimate {condition:e})")]
    SingularMatrix { condition: f64 },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("degenerate back-projection scale at bin {bin}, source {source_index}")]
    DegenerateScale { bin: usize, source_index: usize },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
