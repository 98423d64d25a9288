use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const CONSISTENCY: i32 = 4;
    pub const NOT_CONVERGED: i32 = 5;
    pub const CHECKSUM_MISMATCH: i32 = 6;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("internal consistency: {0}")]
    Consistency(String),
    #[error("training did not converge: {0}")]
    NotConverged(String),
    #[error("dataset checksum mismatch: checkpoint expects {expected}, dataset has {actual}")]
    ChecksumMismatch { expected: String, actual: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Io(_) => exit::IO,
            CliError::Consistency(_) => exit::CONSISTENCY,
            CliError::NotConverged(_) => exit::NOT_CONVERGED,
            CliError::ChecksumMismatch { .. } => exit::CHECKSUM_MISMATCH,
        }
    }
}

impl From<tsrobust::Error> for CliError {
    fn from(e: tsrobust::Error) -> Self {
        use tsrobust::Error as E;
        match e {
            E::Config(_) | E::Usage(_) => CliError::Usage(e.to_string()),
            E::Consistency(_) => CliError::Consistency(e.to_string()),
            E::Load { .. } | E::Conversion(_) | E::Io { .. } | E::Json(_) => CliError::Io(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Wraps an I/O failure with the path involved.
pub fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
