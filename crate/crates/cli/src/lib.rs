//! Command-line front end for `patchlab`.

pub mod commands;
pub mod config;
pub mod verify;

use patchlab::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VERIFY_FAILED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("verification failed: {0}")]
    VerifyFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::VerifyFailed(_) => exit::VERIFY_FAILED,
            CliError::Core(e) => match e {
                Error::InvalidArgument(_) | Error::Census(_) => exit::CONFIG,
                Error::Format { .. } | Error::Io { .. } => exit::DATA,
                Error::NumericFault { .. }
                | Error::TrainingAborted { .. }
                | Error::DegenerateGradient(_)
                | Error::Singularity(_) => exit::NUMERIC,
            },
        }
    }
}
