use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate vector: norm {norm:e} is not above {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("finite-difference oracle failed: {0}")]
    Oracle(String),

    #[error("insufficient data: need {needed} {what}, only {available} available")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    /// Failure inside one cell of a sweep.
    #[error("{cell}: {inner}")]
    Cell { cell: String, inner: Box<Error> },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the input data rather than the configuration.
    pub fn is_data_error(&self) -> bool {
        if let Error::Cell { inner, .. } = self {
            return inner.is_data_error();
        }
        matches!(
            self,
            Error::InsufficientData { .. }
                | Error::Format { .. }
                | Error::Data { .. }
                | Error::Io { .. }
                | Error::Shape(_)
                | Error::DegenerateVector { .. }
        )
    }

    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Cell { inner, .. } => inner.is_config_error(),
            other => matches!(other, Error::Config(_)),
        }
    }
}
