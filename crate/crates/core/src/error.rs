use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("non-finite value at step {step} ({what})")]
    NonFinite { step: usize, what: &'static str },

    #[error("position {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("degenerate output: {0}")]
    Degenerate(String),

    #[error("no usable input: {0}")]
    NoInput(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by the caller's input or configuration rather than by a bug or an
    /// environment failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::InvalidValue(_)
                | Error::OutOfRange { .. }
                | Error::Config(_)
                | Error::Checkpoint(_)
                | Error::NoInput(_)
                | Error::File { .. }
                | Error::Json(_)
        )
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
