use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("row {row}, trait `{trait_id}`: category {value} outside 1..={max}")]
    CategoryOutOfRange {
        row: usize,
        trait_id: String,
        value: i64,
        max: usize,
    },

    #[error("unknown group id `{0}`")]
    UnknownGroup(String),

    #[error("proximity pair ({0}, {1}) is missing")]
    MissingPair(String, String),

    #[error("proximity pair ({0}, {1}) listed twice with different values")]
    AsymmetricPair(String, String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("ordinal fit failed: {message} (iterations: {})", trace.len())]
    FitFailed { message: String, trace: Vec<f64> },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::CategoryOutOfRange { .. }
                | Error::UnknownGroup(_)
                | Error::MissingPair(..)
                | Error::AsymmetricPair(..)
                | Error::Invalid(_)
        )
    }
}
