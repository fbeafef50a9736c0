use thiserror::Error;

/// Exit status contract: 0 success, 1 bad input, 2 failure while running.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Core(#[from] php_av::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        use php_av::Error as E;
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
            Self::Core(
                E::Invalid { .. } | E::UnknownTask(_) | E::DuplicateTask(_) | E::Shape { .. },
            ) => 1,
            Self::Core(_) => 2,
        }
    }
}
