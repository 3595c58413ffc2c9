use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution parameters: {0}")]
    Parameter(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate basis: {0}")]
    DegenerateBasis(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("unknown feature index {index} (bank has {len} features)")]
    Lookup { index: usize, len: usize },
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("run cancelled")]
    Cancelled,
    #[error("refusing to combine results: {0}")]
    MixedResults(String),
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
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
