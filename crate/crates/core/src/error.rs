use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input that has no well-defined answer (zero quaternion, anchor at the camera center).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// Value outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// Caller broke a shape or ordering contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// NaN or infinity where a finite value is required.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("parse error in {file}: field `{field}`: {message}")]
    Parse {
        file: PathBuf,
        field: String,
        message: String,
    },
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        file: impl Into<PathBuf>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            file: file.into(),
            field: field.into(),
            message: message.into(),
        }
    }
}
