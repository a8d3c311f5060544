use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes shared across the crate.
///
/// The CLI maps [`Error::is_numerical`] to exit code 3 and everything
/// else to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("conjugacy unavailable: {0}")]
    Conjugacy(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
