use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric fault in {op}: {detail}")]
    NumericFault { op: String, detail: String },

    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("format error in {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("checkpoint census mismatch:\n{0}")]
    Census(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training aborted at step {step}: {source}")]
    TrainingAborted {
        step: u64,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: &Path, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for faults that originate in floating-point arithmetic
    /// (directly or as the cause of an aborted run).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NumericFault { .. } => true,
            Error::TrainingAborted { .. } => true,
            _ => false,
        }
    }
}
