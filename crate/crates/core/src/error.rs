use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file or inconsistent dimensions.
    #[error("format error: {0}")]
    Format(String),

    /// A value cannot be represented in the output format.
    #[error("encode error: {0}")]
    Encode(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("index {index} out of range (len {len})")]
    Range { index: usize, len: usize },

    /// Invalid parameters, unknown names, missing keys.
    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("corrupt cache record {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, files) rather than
    /// runtime failures.
    pub fn is_user_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Format(_))
    }
}
