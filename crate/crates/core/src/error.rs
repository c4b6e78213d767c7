use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("aggregation failed: {0}")]
    Aggregation(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("serialization failed: {0}")]
    Serialization(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("round {round}, client {client}: {source}")]
    Round {
        round: u32,
        client: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_round(self, round: u32, client: u32) -> Self {
        Error::Round {
            round,
            client,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parameter(_) | Error::Config { .. } | Error::Parse { .. } | Error::Data(_)
        )
    }
}
