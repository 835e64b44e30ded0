//! The enforcement loop and the end-to-end protected call.
//!
//! Every check period the monitor reads the head count, then the trail count
//! (this order can only make the measured staggering smaller, never larger),
//! and acts on the trail:
//!
//! * a running trail whose staggering fell below the threshold is suspended;
//! * a suspended trail whose staggering reached the threshold is resumed;
//! * a negative staggering is recorded as diversity loss;
//! * once the head has exited the trail is resumed for good.
//!
//! One [`StaggeringSample`] is recorded per check.

use std::io::{BufRead, Write};
use std::time::SystemTime;

use log::{debug, warn};

use crate::config::{validate_config, DiversityLossPolicy, MonitorConfig};
use crate::error::{Error, Result};
use crate::integrity::{compare_outputs, inject_fault, Comparison, FaultSpec};
use crate::payload::PayloadSpec;
use crate::progress::{pin_current_thread, ExitStatus, ProgressSource, ReplicaHandle};
use crate::replication::{spawn_stopped, Backend, ReplicaSession, WrappedComputation};
use crate::staggering::{decide, staggering, Action, Decision, StaggeringSample, TrailState};
use crate::verdict::{FailureCause, Role, Verdict};

mod csv;

pub use csv::TRACE_HEADER;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceMetadata {
    pub config: MonitorConfig,
    pub backend: String,
    pub started_at: SystemTime,
    pub finished_at: SystemTime,
}

/// The samples of one protected run plus what produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub samples: Vec<StaggeringSample>,
    pub metadata: TraceMetadata,
}

impl Trace {
    pub fn staggerings(&self) -> impl Iterator<Item = i64> + '_ {
        self.samples.iter().map(|s| s.staggering)
    }

    /// Smallest sampled staggering before the head finished, which is the
    /// part of the run where staggering is enforced.
    pub fn min_live_staggering(&self) -> Option<i64> {
        self.samples
            .iter()
            .take_while(|s| s.action != Action::HeadDone)
            .map(|s| s.staggering)
            .min()
    }

    pub fn count(&self, action: Action) -> usize {
        self.samples.iter().filter(|s| s.action == action).count()
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        write_trace(self, sink)
    }

    /// Checks the structural rules every trace obeys; see [`check_samples`].
    pub fn check(&self) -> std::result::Result<(), String> {
        check_samples(&self.samples)
    }
}

/// Checks that a sample sequence could have come from the enforcement loop.
///
/// Intervals strictly increase, timestamps never decrease, each staggering
/// equals head minus trail, suspend and resume alternate starting from a
/// suspended trail, `HEAD_DONE` and `TRAIL_DONE` appear at most once, and
/// no suspension follows `HEAD_DONE`.
pub fn check_samples(samples: &[StaggeringSample]) -> std::result::Result<(), String> {
    let mut trail = TrailState::Suspended;
    let mut head_done = false;
    let mut trail_done = false;
    for (i, s) in samples.iter().enumerate() {
        let at = |msg: &str| format!("sample {i} (interval {}): {msg}", s.interval_index);
        if i > 0 {
            let prev = &samples[i - 1];
            if s.interval_index <= prev.interval_index {
                return Err(at("interval index does not increase"));
            }
            if s.timestamp_ns < prev.timestamp_ns {
                return Err(at("timestamp goes backwards"));
            }
        }
        if staggering(s.head_count, s.trail_count).ok() != Some(s.staggering) {
            return Err(at("staggering is not head - trail"));
        }
        match s.action {
            Action::Suspend if trail != TrailState::Running => return Err(at("suspend of a suspended trail")),
            Action::Suspend if head_done => return Err(at("suspend after head finished")),
            Action::Suspend => trail = TrailState::Suspended,
            Action::Resume if trail != TrailState::Suspended => return Err(at("resume of a running trail")),
            Action::Resume => trail = TrailState::Running,
            Action::HeadDone if head_done => return Err(at("second HEAD_DONE")),
            Action::HeadDone => {
                head_done = true;
                trail = TrailState::Running;
            }
            Action::TrailDone if trail_done => return Err(at("second TRAIL_DONE")),
            Action::TrailDone => trail_done = true,
            Action::DiversityLoss => trail = TrailState::Suspended,
            Action::None => {}
        }
    }
    Ok(())
}

/// Writes the trace as CSV (see [`TRACE_HEADER`]).
pub fn write_trace<W: Write>(trace: &Trace, sink: W) -> Result<()> {
    csv::write_samples(&trace.samples, sink)
}

/// Reads samples written by [`write_trace`].
pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<StaggeringSample>> {
    csv::read_samples(reader)
}

/// Something the caller of the loop wants done to a replica between checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intervention {
    Kill(Role),
}

/// Why the enforcement loop stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoopEnd {
    /// Both replicas exited successfully.
    Completed,
    ReplicaFailed { role: Role, cause: FailureCause },
    /// Negative staggering under [`DiversityLossPolicy::AbortRun`].
    DiversityLoss(StaggeringSample),
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopReport {
    pub samples: Vec<StaggeringSample>,
    pub end: LoopEnd,
}

/// Runs the enforcement loop until both replicas have exited, one fails,
/// the timeout elapses, or diversity is lost under `AbortRun`.
///
/// The trail must be suspended on entry.
pub fn enforcement_loop(
    head: ReplicaHandle,
    trail: ReplicaHandle,
    source: &mut dyn ProgressSource,
    config: &MonitorConfig,
) -> Result<LoopReport> {
    enforcement_loop_with(head, trail, source, config, &mut |_| Vec::new())
}

/// [`enforcement_loop`] with a callback invoked after every sample.
pub fn enforcement_loop_with(
    head: ReplicaHandle,
    trail: ReplicaHandle,
    source: &mut dyn ProgressSource,
    config: &MonitorConfig,
    on_sample: &mut dyn FnMut(&StaggeringSample) -> Vec<Intervention>,
) -> Result<LoopReport> {
    let threshold = config.threshold_instructions;
    let timeout_ns = config.run_timeout.map(|t| t.as_nanos());
    let start = source.now_ns();
    let mut trail_state = TrailState::Suspended;
    let mut head_done = false;
    let mut trail_done = false;
    let mut samples = Vec::new();
    let mut interval = 0u64;

    let end = loop {
        source.wait(config.check_period);
        interval += 1;
        let timestamp_ns = source.now_ns().saturating_sub(start);

        let head_count = match source.read_count(head) {
            Ok(c) => c,
            Err(e) => {
                warn!("lost head counter: {e}");
                break LoopEnd::ReplicaFailed {
                    role: Role::Head,
                    cause: FailureCause::CounterLost,
                };
            }
        };
        let trail_count = match source.read_count(trail) {
            Ok(c) => c,
            Err(e) => {
                warn!("lost trail counter: {e}");
                break LoopEnd::ReplicaFailed {
                    role: Role::Trail,
                    cause: FailureCause::CounterLost,
                };
            }
        };
        let stagger = staggering(head_count, trail_count)?;

        let head_exit = if head_done { None } else { source.is_terminated(head)? };
        let trail_exit = if trail_done || head_exit.is_some() {
            None
        } else {
            source.is_terminated(trail)?
        };

        let mut failure = None;
        let mut abort = false;
        let action = if let Some(status) = head_exit {
            head_done = true;
            match status {
                ExitStatus::Failure(cause) => failure = Some((Role::Head, cause)),
                ExitStatus::Success => {
                    if !trail_done && trail_state == TrailState::Suspended {
                        source.resume(trail)?;
                        trail_state = TrailState::Running;
                    }
                }
            }
            Action::HeadDone
        } else if let Some(status) = trail_exit {
            trail_done = true;
            if let ExitStatus::Failure(cause) = status {
                failure = Some((Role::Trail, cause));
            }
            Action::TrailDone
        } else if head_done || trail_done {
            Action::None
        } else if stagger < 0 {
            match config.diversity_loss_policy {
                DiversityLossPolicy::AbortRun => abort = true,
                DiversityLossPolicy::RecordAndContinue => {
                    if trail_state == TrailState::Running {
                        source.suspend(trail)?;
                        trail_state = TrailState::Suspended;
                    }
                }
            }
            Action::DiversityLoss
        } else {
            let decision = decide(stagger, threshold, trail_state);
            match decision {
                Decision::Suspend => {
                    source.suspend(trail)?;
                    trail_state = TrailState::Suspended;
                }
                Decision::Resume => {
                    source.resume(trail)?;
                    trail_state = TrailState::Running;
                }
                Decision::None => {}
            }
            decision.into()
        };

        let sample = StaggeringSample {
            interval_index: interval,
            timestamp_ns,
            head_count,
            trail_count,
            staggering: stagger,
            action,
        };
        debug!(
            "interval {interval}: head={head_count} trail={trail_count} staggering={stagger} {action}"
        );
        samples.push(sample);

        for intervention in on_sample(&sample) {
            match intervention {
                Intervention::Kill(Role::Head) => source.kill(head)?,
                Intervention::Kill(Role::Trail) => source.kill(trail)?,
            }
        }

        if abort {
            break LoopEnd::DiversityLoss(sample);
        }
        if let Some((role, cause)) = failure {
            break LoopEnd::ReplicaFailed { role, cause };
        }
        if head_done && trail_done {
            break LoopEnd::Completed;
        }
        if timeout_ns.is_some_and(|t| u128::from(timestamp_ns) >= t) {
            break LoopEnd::Timeout;
        }
    };
    Ok(LoopReport { samples, end })
}

/// Backend and faults for [`protect_with`].
#[derive(Debug, Clone, Default)]
pub struct ProtectOptions {
    pub backend: Backend,
    pub faults: Vec<FaultSpec>,
}

impl ProtectOptions {
    pub fn new(backend: Backend) -> Self {
        ProtectOptions {
            backend,
            faults: Vec::new(),
        }
    }

    pub fn with_fault(mut self, fault: FaultSpec) -> Self {
        self.faults.push(fault);
        self
    }
}

/// Result of [`protect_payload`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtectedRun {
    pub verdict: Verdict,
    pub trace: Trace,
    /// The head's outputs, present only on a match.
    pub outputs: Option<Vec<Vec<u8>>>,
}

/// Runs `computation` redundantly under the monitor on the default backend
/// (forked processes counted with retired user-mode instructions).
///
/// On [`Verdict::Match`] the outputs are filled with the results; otherwise
/// they are left untouched.
pub fn protect<C: WrappedComputation + ?Sized>(
    computation: &C,
    inputs: &[&[u8]],
    input_sizes: &[usize],
    outputs: &mut [&mut [u8]],
    output_sizes: &[usize],
    config: &MonitorConfig,
) -> Result<(Verdict, Trace)> {
    protect_with(
        computation,
        inputs,
        input_sizes,
        outputs,
        output_sizes,
        config,
        &ProtectOptions::default(),
    )
}

/// [`protect`] with an explicit backend and injected faults.
pub fn protect_with<C: WrappedComputation + ?Sized>(
    computation: &C,
    inputs: &[&[u8]],
    input_sizes: &[usize],
    outputs: &mut [&mut [u8]],
    output_sizes: &[usize],
    config: &MonitorConfig,
    options: &ProtectOptions,
) -> Result<(Verdict, Trace)> {
    if outputs.len() != output_sizes.len() {
        return Err(Error::InvalidPayload(format!(
            "{} output buffers but {} output sizes",
            outputs.len(),
            output_sizes.len()
        )));
    }
    for (i, (buf, &size)) in outputs.iter().zip(output_sizes).enumerate() {
        if buf.len() != size {
            return Err(Error::InvalidPayload(format!(
                "output {i} declared {size} bytes but buffer holds {}",
                buf.len()
            )));
        }
    }
    let payload = PayloadSpec::from_parts(inputs, input_sizes, output_sizes)?;
    let run = protect_payload(computation, &payload, config, options)?;
    if let Some(results) = &run.outputs {
        for (dst, src) in outputs.iter_mut().zip(results) {
            dst.copy_from_slice(src);
        }
    }
    Ok((run.verdict, run.trace))
}

/// Owned-data form of [`protect_with`].
pub fn protect_payload<C: WrappedComputation + ?Sized>(
    computation: &C,
    payload: &PayloadSpec,
    config: &MonitorConfig,
    options: &ProtectOptions,
) -> Result<ProtectedRun> {
    let errors = validate_config(config);
    if !errors.is_empty() {
        return Err(Error::InvalidConfig(errors));
    }
    for fault in &options.faults {
        fault.validate(&payload.output_sizes)?;
    }
    let started_at = SystemTime::now();
    let mut session = spawn_stopped(computation, payload, config, &options.backend)?;
    let result = supervise(&mut session, config, &options.faults);
    session.release();
    let (report, verdict, outputs) = result?;
    Ok(ProtectedRun {
        verdict,
        trace: Trace {
            samples: report.samples,
            metadata: TraceMetadata {
                config: config.clone(),
                backend: options.backend.name(),
                started_at,
                finished_at: SystemTime::now(),
            },
        },
        outputs,
    })
}

type Supervised = (LoopReport, Verdict, Option<Vec<Vec<u8>>>);

fn supervise(session: &mut ReplicaSession, config: &MonitorConfig, faults: &[FaultSpec]) -> Result<Supervised> {
    for fault in faults {
        inject_fault(session, fault)?;
    }
    session.start()?;
    let (head, trail) = (session.head(), session.trail());
    let mut triggers = session.take_crash_triggers();
    let report = {
        let source = session.source_mut();
        std::thread::scope(|scope| {
            let monitor = scope.spawn(move || {
                if let Some(core) = config.monitor_core {
                    pin_current_thread(core).map_err(|e| Error::PinningFailure {
                        what: "monitor",
                        core,
                        reason: e.to_string(),
                    })?;
                }
                let mut on_sample = |s: &StaggeringSample| {
                    let mut fired = Vec::new();
                    triggers.retain(|&(role, after)| {
                        let count = match role {
                            Role::Head => s.head_count,
                            Role::Trail => s.trail_count,
                        };
                        let fire = count >= after;
                        if fire {
                            fired.push(Intervention::Kill(role));
                        }
                        !fire
                    });
                    fired
                };
                enforcement_loop_with(head, trail, source, config, &mut on_sample)
            });
            monitor
                .join()
                .unwrap_or_else(|panic| std::panic::resume_unwind(panic))
        })?
    };

    let verdict = match &report.end {
        LoopEnd::DiversityLoss(sample) => Verdict::DiversityLoss(*sample),
        LoopEnd::Timeout => Verdict::Timeout,
        LoopEnd::ReplicaFailed { role, cause } => Verdict::ReplicaFailure {
            role: *role,
            cause: *cause,
        },
        LoopEnd::Completed => {
            let collected = session
                .collect_outputs(Role::Head)
                .and_then(|h| Ok((h, session.collect_outputs(Role::Trail)?)));
            let (head_out, trail_out) = match collected {
                Ok(pair) => pair,
                Err(Error::ReplicaFailure { role, cause }) => {
                    return Ok((report, Verdict::ReplicaFailure { role, cause }, None));
                }
                Err(e) => return Err(e),
            };
            match compare_outputs(&head_out, &trail_out, session.output_sizes())? {
                Comparison::Match => return Ok((report, Verdict::Match, Some(head_out))),
                Comparison::Mismatch(locations) => Verdict::Mismatch(locations),
            }
        }
    };
    Ok((report, verdict, None))
}
