//! Error type shared across the engine.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape mismatch, bad code, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric failure (NaN/Inf, singular matrix, diverged loss).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Schema declaration or schema/data mismatch.
    #[error("schema error: {0}")]
    Schema(String),

    /// Malformed input data.
    #[error("parse error: {0}")]
    Parse(String),

    /// Checkpoint or results-tree versioning / integrity problems.
    #[error("format error: {0}")]
    Format(String),

    /// Operation not available for this configuration.
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }

    /// Stable machine-readable kind tag, used by the HTTP layer and the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Schema(_) => "schema",
            Error::Parse(_) => "parse",
            Error::Format(_) => "format",
            Error::Unsupported(_) => "unsupported",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
