use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record `{id}`: {message}")]
    Validation { id: String, message: String },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("no matching entry for id `{0}`")]
    MissingJoin(String),

    #[error("record `{0}` has no tokens to score")]
    EmptyTokens(String),

    #[error("record `{0}`: token lacks alternatives; use the probgate scorer instead")]
    MissingAlternatives(String),

    #[error("gate size k={k} exceeds the {n} available scores")]
    GateOutOfRange { k: usize, n: usize },

    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot open database {path}: {source}")]
    Database {
        path: PathBuf,
        #[source]
        source: rusqlite::Error,
    },

    #[error("gold query for `{id}` failed to execute ({status:?}): {message}")]
    GoldExecution {
        id: String,
        status: crate::exec::ExecStatus,
        message: String,
    },

    #[error("{0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            id: id.into(),
            message: message.into(),
        }
    }
}
