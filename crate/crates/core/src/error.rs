use std::io;

use thiserror::Error;

use crate::config::ConfigError;
use crate::progress::ReplicaId;
use crate::verdict::{FailureCause, Role};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", join(.0))]
    InvalidConfig(Vec<ConfigError>),

    #[error("invalid payload: {0}")]
    InvalidPayload(String),

    #[error("staggering of head={head} trail={trail} does not fit in a signed 64-bit count")]
    StaggeringOverflow { head: u64, trail: u64 },

    #[error("instruction counter unavailable: {reason}\nhint: {remediation}")]
    CounterUnavailable { reason: String, remediation: String },

    #[error("replica handle {0} is stale (replica already reaped)")]
    StaleHandle(ReplicaId),

    #[error("failed to spawn replica: {0}")]
    SpawnFailure(String),

    #[error("failed to pin {what} to core {core}: {reason}")]
    PinningFailure {
        what: &'static str,
        core: usize,
        reason: String,
    },

    #[error("{role} replica failed: {cause}")]
    ReplicaFailure { role: Role, cause: FailureCause },

    #[error("{0} replica has not terminated yet")]
    Incomplete(Role),

    #[error("output shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid fault coordinates: {0}")]
    InvalidCoordinates(String),

    #[error("search space of {schedules} schedules exceeds the limit of {limit}")]
    SearchSpaceTooLarge { schedules: u128, limit: u128 },

    #[error("trace is empty")]
    EmptyTrace,

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}

fn join(errors: &[ConfigError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
