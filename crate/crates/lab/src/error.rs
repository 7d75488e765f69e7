use std::path::PathBuf;

use liera_core::Error as CoreError;

/// Harness errors, grouped by the process exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: CoreError },
    #[error("numeric failure: {0}")]
    Numeric(CoreError),
    #[error("{0}")]
    Core(CoreError),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type LabResult<T> = Result<T, LabError>;

pub mod exit {
    pub const OK: i32 = 0;
    pub const VERIFY: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

impl LabError {
    pub fn config(msg: impl Into<String>) -> Self {
        LabError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Core(_) => exit::CONFIG,
            LabError::Io { .. } | LabError::Format { .. } | LabError::Csv(_) => exit::IO,
            LabError::Numeric(_) => exit::NUMERIC,
            LabError::Verify(_) => exit::VERIFY,
        }
    }
}

impl From<CoreError> for LabError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite { .. }
            | CoreError::Domain { .. }
            | CoreError::NotAMember { .. }
            | CoreError::LeftGroup { .. }
            | CoreError::ExpOverflow { .. }
            | CoreError::NoConvergence { .. } => LabError::Numeric(e),
            other => LabError::Core(other),
        }
    }
}
