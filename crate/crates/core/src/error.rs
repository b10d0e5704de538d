use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// A dense representation would exceed the configured size cap.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Malformed binary input.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Invalid experiment configuration.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// A numerical routine failed to produce a finite answer.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
