//! Diverse redundancy in software.
//!
//! A computation is run twice, as a *head* and a *trail* process. A monitor
//! samples both retired-instruction counts every check period and suspends
//! the trail whenever it gets closer than a threshold to the head, so the two
//! copies never hold the same state at the same instant. A fault that hits
//! both at once (a voltage glitch, say) then corrupts them differently and
//! the final output comparison catches it.
//!
//! ```
//! use std::time::Duration;
//! use softdr::progress::{Scenario, ScriptedReplica};
//! use softdr::replication::{Backend, WrapperResult};
//! use softdr::{protect_with, MonitorConfig, ProtectOptions, Verdict};
//!
//! fn answer(_: &[&[u8]], out: &mut [&mut [u8]]) -> WrapperResult {
//!     out[0][0] = 42;
//!     Ok(())
//! }
//!
//! // Scripted progress: both replicas retire 100 instructions per 1 ms tick.
//! let scenario = Scenario {
//!     tick: Duration::from_millis(1),
//!     head: ScriptedReplica::new(vec![100; 20]),
//!     trail: ScriptedReplica::new(vec![100; 20]),
//! };
//! let config = MonitorConfig::new(150);
//! let mut out = [0u8; 1];
//! let (verdict, trace) = protect_with(
//!     &answer, &[], &[], &mut [&mut out], &[1], &config,
//!     &ProtectOptions::new(Backend::Scripted(scenario)),
//! )?;
//! assert_eq!(verdict, Verdict::Match);
//! assert_eq!(out[0], 42);
//! assert_eq!(trace.samples[1].staggering, 200);
//! # Ok::<(), softdr::Error>(())
//! ```
//!
//! With the default backend ([`protect`]) the replicas are forked processes
//! counted through Linux perf events.

pub mod calibration;
pub mod config;
pub mod error;
pub mod integrity;
pub mod monitor;
pub mod payload;
pub mod progress;
pub mod replication;
pub mod sim;
pub mod staggering;
pub mod verdict;
pub mod workloads;

pub use calibration::{recommend_threshold, CalibrationReport};
pub use config::{validate_config, ConfigError, DiversityLossPolicy, MonitorConfig, StartupPolicy};
pub use error::{Error, Result};
pub use integrity::{compare_outputs, inject_fault, Comparison, FaultKind, FaultSpec};
pub use monitor::{enforcement_loop, protect, protect_payload, protect_with, write_trace, ProtectOptions, ProtectedRun, Trace};
pub use payload::PayloadSpec;
pub use progress::{ProgressSource, ReplicaHandle};
pub use replication::{spawn_replicas, Backend, ReplicaSession, WrappedComputation};
pub use staggering::{decide, staggering, Action, Decision, StaggeringSample, TrailState};
pub use verdict::{FailureCause, MismatchLocation, Role, Verdict};

// The guide's code listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/staggering.md")]
    pub struct Staggering;
    #[doc = include_str!("../../../book/src/monitor.md")]
    pub struct Monitor;
    #[doc = include_str!("../../../book/src/faults.md")]
    pub struct Faults;
    #[doc = include_str!("../../../book/src/simulator.md")]
    pub struct Simulator;
    #[doc = include_str!("../../../book/src/calibration.md")]
    pub struct Calibration;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
