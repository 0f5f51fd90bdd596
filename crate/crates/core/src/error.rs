use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// The caller asked for something the inputs cannot support.
    #[error("usage error: {0}")]
    Usage(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A persisted file (tensor, checkpoint, dataset index) is malformed.
    #[error("load error in {path}: {message}")]
    Load { path: PathBuf, message: String },

    /// A config file could not be parsed.
    #[error("config error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn load(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Usage errors map to exit code 2; everything else is a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Parse { .. })
    }
}
