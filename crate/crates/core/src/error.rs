use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid argument to an operation (shapes, ranges, labels).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Episode sampling could not satisfy its preconditions.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Frontdoor or conditional estimate hit a zero-probability cell.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// Non-finite loss or parameters during training.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The run would exceed the configured working-set budget.
    #[error("resource limit: {0}")]
    ResourceLimit(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code for this error: 1 for usage/config problems, 2 for
    /// runtime or numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Parse { .. } => 1,
            _ => 2,
        }
    }
}
