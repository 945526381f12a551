use std::path::PathBuf;

use facetx_core::Error as CoreError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NAN_ABORT: i32 = 4;
    pub const CHECKPOINT: i32 = 5;
    pub const GRADCHECK: i32 = 6;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CoreError,
    },
    #[error("training aborted at step {step}: {source}; last good state kept in {checkpoint}")]
    NanAbort {
        step: u64,
        checkpoint: PathBuf,
        #[source]
        source: CoreError,
    },
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradcheckFailed(Vec<String>),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => exit::IO,
            CliError::Config(_) => exit::CONFIG,
            CliError::Data(_) => exit::DATA,
            CliError::Checkpoint {
                source: CoreError::ConfigMismatch { .. },
                ..
            } => exit::CHECKPOINT,
            CliError::Checkpoint { .. } => exit::CHECKPOINT,
            CliError::NanAbort { .. } => exit::NAN_ABORT,
            CliError::GradcheckFailed(_) => exit::GRADCHECK,
            CliError::Core(e) => match e {
                CoreError::NonFinite { .. } | CoreError::NonFiniteLoss { .. } => exit::NAN_ABORT,
                CoreError::ConfigMismatch { .. } => exit::CHECKPOINT,
                CoreError::Format(_) | CoreError::Validation(_) => exit::DATA,
                _ => exit::IO,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
