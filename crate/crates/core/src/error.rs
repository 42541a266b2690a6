use std::path::PathBuf;

use crate::estimator::StepTrace;

/// Errors produced anywhere in the odometry pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid depth {0}: depth must be finite and strictly positive")]
    InvalidDepth(f64),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("estimation failed: {reason}")]
    EstimationFailure {
        reason: String,
        trace: Option<Box<StepTrace>>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line frontend: 1 for estimation
    /// failures, 2 for everything caused by bad input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::EstimationFailure { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
