use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AdError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),

    #[error("non-finite state after integration")]
    NonFiniteState,

    #[error("rollout diverged at step {step}: {source}")]
    RolloutDiverged {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("all {count} rollouts of the batch failed")]
    AllRolloutsFailed { count: usize },

    #[error("generation {generation} out of range for a schedule of {total}")]
    ScheduleRange { generation: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed policy file {path}: {msg}")]
    PolicyFormat { path: PathBuf, msg: String },

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("{what} {value:e} exceeds threshold {limit:e}")]
    ThresholdBreach {
        what: &'static str,
        value: f64,
        limit: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Autodiff(_)
                | Error::NonFiniteState
                | Error::RolloutDiverged { .. }
                | Error::AllRolloutsFailed { .. }
        )
    }
}

/// Process exit status for an error: 1 configuration, 2 numerical, 3 threshold.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ThresholdBreach { .. } => 3,
        e if e.is_numerical() => 2,
        _ => 1,
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
