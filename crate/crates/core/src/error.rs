use thiserror::Error;

/// Errors raised across the crate.
///
/// Every variant maps onto a short, stable category string (see
/// [`Error::category`]) that the command-line driver prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty result: {0}")]
    EmptyResult(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("environment error: {0}")]
    Env(String),
    #[error("bridge error ({status}): {message}")]
    Bridge { status: u16, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::Dimension(_) => "dimension",
            Error::EmptyResult(_) => "empty-result",
            Error::Config(_) => "config",
            Error::MissingInput(_) => "missing-input",
            Error::Parse(_) => "parse",
            Error::Env(_) => "environment",
            Error::Bridge { .. } => "bridge",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
