use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, hyperparameters or architecture settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// The caller violated an operation's precondition (bad label, reused tape, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("load error in {path}{}: {message}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Load {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },

    #[error("conversion error: {0}")]
    Conversion(String),

    /// An invariant the toolkit itself is responsible for did not hold.
    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
