use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI file {path}: {reason}")]
    Nifti { path: PathBuf, reason: String },

    #[error("unsupported data type: {0}")]
    UnsupportedDtype(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("sequence mismatch: {0}")]
    SequenceMismatch(String),

    #[error("invalid value: {0}")]
    Validation(String),

    #[error("patch out of bounds: {0}")]
    PatchOutOfBounds(String),

    #[error("singular covariance for class {0}")]
    SingularCovariance(String),

    #[error("{0}")]
    Schema(String),

    #[error("numerical defect: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Prefixes the message with `what`, keeping the variant.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            Error::Validation(m) => Error::Validation(format!("{what}: {m}")),
            Error::GridMismatch(m) => Error::GridMismatch(format!("{what}: {m}")),
            Error::SequenceMismatch(m) => Error::SequenceMismatch(format!("{what}: {m}")),
            Error::Schema(m) => Error::Schema(format!("{what}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{what}: {m}")),
            other => other,
        }
    }

    /// True for errors caused by the filesystem rather than by the inputs'
    /// content. The CLI maps these to exit code 1 and everything else to 2.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Schema(format!("json: {e}"))
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Schema(format!("csv: {e}"))
    }
}
