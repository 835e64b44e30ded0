//! Per-replica progress counting and suspension control.
//!
//! A [`ProgressSource`] owns a set of replicas and answers the monitor's
//! questions about them: how many instructions each has retired, whether it
//! has exited, and it carries out suspend/resume requests. Two backends
//! exist:
//!
//! * [`ProcessSource`] drives real child processes through Linux perf
//!   counters and job-control signals.
//! * [`ScriptedSource`] replays per-tick instruction deltas so protocol tests
//!   are exact and need no privileges.
//!
//! The source also provides the monitor's notion of time, which lets the
//! scripted backend run the very same enforcement loop in virtual time.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use crate::error::Result;
use crate::verdict::{FailureCause, Role};

mod perf;
mod process;
mod scripted;

pub use perf::{CounterEvent, PerfCounter};
pub use process::{pin_current_thread, ProcessSource};
pub(crate) use process::PANIC_EXIT_CODE;
pub use scripted::{Scenario, ScriptedReplica, ScriptedSource, Termination};

/// Process-wide unique replica identifier. Never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ReplicaId(u64);

impl ReplicaId {
    pub(crate) fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        ReplicaId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReplicaHandle {
    pub id: ReplicaId,
    pub role: Role,
}

impl ReplicaHandle {
    pub(crate) fn new(role: Role) -> Self {
        ReplicaHandle {
            id: ReplicaId::fresh(),
            role,
        }
    }
}

/// How a replica ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitStatus {
    Success,
    Failure(FailureCause),
}

impl ExitStatus {
    pub fn is_success(self) -> bool {
        self == ExitStatus::Success
    }
}

/// What the monitor needs from a replica backend.
///
/// All calls for one session come from a single context; implementations do
/// not need to be reentrant.
pub trait ProgressSource: Send {
    fn backend_name(&self) -> String;

    /// Cumulative retired instructions since the replica was created.
    /// Non-decreasing across calls and readable while the replica is stopped.
    fn read_count(&mut self, replica: ReplicaHandle) -> Result<u64>;

    /// Stops the replica. Idempotent; a no-op once the replica has exited.
    fn suspend(&mut self, replica: ReplicaHandle) -> Result<()>;

    /// Lets the replica run again. Idempotent; a no-op once it has exited.
    fn resume(&mut self, replica: ReplicaHandle) -> Result<()>;

    /// Forcefully terminates the replica (fail-stop).
    fn kill(&mut self, replica: ReplicaHandle) -> Result<()>;

    /// `Some` once the replica has exited.
    fn is_terminated(&mut self, replica: ReplicaHandle) -> Result<Option<ExitStatus>>;

    /// Monotonic nanoseconds on this backend's clock.
    fn now_ns(&self) -> u64;

    /// Lets `period` elapse on this backend's clock.
    fn wait(&mut self, period: Duration);
}
