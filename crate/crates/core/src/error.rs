use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("degenerate transfer: {0}")]
    DegenerateTransfer(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("placement failed: {0}")]
    Placement(String),
    #[error("undefined translation: {0}")]
    UndefinedTranslation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the command line: 1 for validation problems, 2 for
    /// runtime or numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::InvalidParameter(_)
            | Error::Config(_)
            | Error::Format(_)
            | Error::Io { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
