use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file. `context` names the module and file that failed.
    #[error("{context}: {message}")]
    Format { context: String, message: String },

    #[error("{context}: invalid UTF-8 at byte {offset}")]
    Decode { context: String, offset: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Teacher rows and corpus rows disagree.
    #[error("misaligned data: {0}")]
    Misaligned(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error (status {status}): {body}")]
    Protocol { status: u16, body: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }
}
