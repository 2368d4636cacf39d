use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{}: {message} (line {line})", path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<input>".into()))]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training produced a non-finite loss; carries the component values.
    #[error("non-finite loss at epoch {epoch}, step {step}: {components}")]
    NonFinite {
        epoch: usize,
        step: usize,
        components: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
