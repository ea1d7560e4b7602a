use std::time::Duration;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an input that violates an operation's precondition.
    #[error("invalid input: {0}")]
    Validation(String),

    /// The selected backend or provider lacks something the method needs.
    #[error("missing capability: {capability}")]
    Capability { capability: String },

    /// Transport, auth or server-side failure from a remote model/embedding service.
    #[error("backend failure: {message}")]
    Backend {
        message: String,
        retry_after: Option<Duration>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn capability(cap: impl Into<String>) -> Self {
        Error::Capability {
            capability: cap.into(),
        }
    }

    pub fn backend(msg: impl Into<String>) -> Self {
        Error::Backend {
            message: msg.into(),
            retry_after: None,
        }
    }

    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Backend { .. })
    }
}
