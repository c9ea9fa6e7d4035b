use thiserror::Error;

/// Crate-wide error type.
///
/// `Domain` and `Config` indicate caller mistakes (bad arguments, invalid
/// configuration); the CLI maps them to exit code 2. Everything else is a
/// runtime failure (exit code 1).
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration file or flag combination is invalid.
    #[error("config error: {0}")]
    Config(String),
    /// A serialized container (event block, sample, checkpoint) is malformed.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// True for errors the CLI reports as usage/config problems (exit 2).
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Domain(_) | Error::Config(_))
    }
}
