use std::path::PathBuf;

use cochstream_numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav error on {path}: {message}")]
    Wav { path: PathBuf, message: String },
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unknown label(s): {0}")]
    UnknownLabel(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format { path: path.into(), message: message.into() }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
