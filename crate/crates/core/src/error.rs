use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration, spec or input violated a declared invariant.
    #[error("invalid {what}: {reason}")]
    Invalid { what: String, reason: String },

    #[error("shape mismatch at {location}: expected {expected:?}, got {actual:?}")]
    Shape {
        location: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("task `{0}` is already registered")]
    DuplicateTask(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("corrupt checkpoint array `{name}`: {reason}")]
    CorruptArray { name: String, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(location: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            location: location.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Whether the error stems from bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid { .. }
                | Error::Shape { .. }
                | Error::UnknownTask(_)
                | Error::DuplicateTask(_)
        )
    }
}
