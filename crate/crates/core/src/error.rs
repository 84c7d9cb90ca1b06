use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("version mismatch: {0}")]
    Version(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// I/O-class failures (missing files, unreadable data) as opposed to
    /// contract violations by the caller.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format(_) | Error::Version(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
