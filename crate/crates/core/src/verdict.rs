use std::fmt;

use crate::staggering::StaggeringSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Head,
    Trail,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Head => "head",
            Role::Trail => "trail",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "head" => Ok(Role::Head),
            "trail" => Ok(Role::Trail),
            _ => Err(format!("unknown role {s:?}, expected head or trail")),
        }
    }
}

/// Why a replica did not finish successfully.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureCause {
    /// Terminated by a signal.
    Crash { signal: i32 },
    /// Exited on its own with a nonzero status (wrapper error or panic).
    NonZeroExit { code: i32 },
    /// Its progress counter could no longer be read.
    CounterLost,
}

impl fmt::Display for FailureCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureCause::Crash { signal } => write!(f, "crashed (signal {signal})"),
            FailureCause::NonZeroExit { code } => write!(f, "exited with status {code}"),
            FailureCause::CounterLost => f.write_str("progress counter lost"),
        }
    }
}

/// First differing byte of one output buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MismatchLocation {
    pub output_index: usize,
    pub byte_offset: usize,
}

/// Outcome of a protected run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Match,
    /// Never empty.
    Mismatch(Vec<MismatchLocation>),
    ReplicaFailure { role: Role, cause: FailureCause },
    /// Only produced under [`DiversityLossPolicy::AbortRun`](crate::DiversityLossPolicy::AbortRun).
    DiversityLoss(StaggeringSample),
    Timeout,
}

impl Verdict {
    pub fn is_match(&self) -> bool {
        matches!(self, Verdict::Match)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Match => f.write_str("MATCH"),
            Verdict::Mismatch(locations) => {
                f.write_str("MISMATCH")?;
                for loc in locations {
                    write!(f, " output {} byte {}", loc.output_index, loc.byte_offset)?;
                }
                Ok(())
            }
            Verdict::ReplicaFailure { role, cause } => {
                write!(f, "REPLICA_FAILURE {role} {cause}")
            }
            Verdict::DiversityLoss(s) => write!(
                f,
                "DIVERSITY_LOSS at interval {} (staggering {})",
                s.interval_index, s.staggering
            ),
            Verdict::Timeout => f.write_str("TIMEOUT"),
        }
    }
}
