//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type. The variants map onto the CLI exit-code contract:
/// config errors exit 2, data errors exit 3, numeric failures exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }

    /// One-word machine-parsable category used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Numeric(_) => "numeric",
            Error::InvalidArgument(_) => "argument",
            Error::Shape(_) => "shape",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
