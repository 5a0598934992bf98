use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad magic, impossible dimensions, malformed JSON lines.
    #[error("format error: {0}")]
    Format(String),

    /// Truncated payloads or non-finite pixel data.
    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("join error: {0}")]
    Join(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("did not converge: {0}")]
    Convergence(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("audit error: {0}")]
    Audit(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
