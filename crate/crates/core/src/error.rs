use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    Validation(String),

    #[error("malformed IDX data: {0}")]
    Format(String),

    #[error("truncated IDX data: header promises {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("config error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("data error: {0}")]
    Data(String),

    #[error("runtime failure: {0}")]
    Runtime(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
