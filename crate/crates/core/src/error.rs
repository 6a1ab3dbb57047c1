use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("zero attention denominator at token {token}")]
    ZeroDenominator { token: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Broad failure classes, used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parse { .. }
            | Error::EmptyInput(_)
            | Error::InvalidArgument(_)
            | Error::Shape { .. }
            | Error::StaleCache(_) => ErrorClass::Validation,
            Error::ZeroDenominator { .. } | Error::NonFinite(_) | Error::Numerical(_) => {
                ErrorClass::Numerical
            }
            Error::Format { .. } | Error::Io(_) | Error::Json(_) => ErrorClass::Io,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
