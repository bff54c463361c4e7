use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A record violated a type invariant.
    #[error("validation failed on `{field}`: {reason}")]
    Validation { field: String, reason: String },

    /// An argument fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("incompatible checkpoint {path}: {reason}")]
    IncompatibleCheckpoint { path: PathBuf, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn parse(line: usize, reason: impl Into<String>) -> Self {
        Self::Parse {
            line,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::IncompatibleCheckpoint { .. } => 2,
            Error::Validation { .. } | Error::Parse { .. } | Error::Data(_) | Error::Io { .. } => 3,
            _ => 4,
        }
    }
}
