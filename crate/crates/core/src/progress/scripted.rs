//! Deterministic test double driven by per-tick instruction deltas.
//!
//! Time advances in whole ticks. On tick `t` (1-based) every running replica
//! retires `deltas[t - 1]` instructions. A suspend issued at tick `k` with a
//! latency of `L` ticks still lets the replica retire on ticks `k+1..=k+L`;
//! from tick `k+L+1` on its count stays put until it is resumed. A resume at
//! tick `k` takes effect on tick `k+1`.

use std::fmt::Write as _;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::staggering::{Action, StaggeringSample};
use crate::verdict::{FailureCause, Role};

use super::{ExitStatus, ProgressSource, ReplicaHandle};

/// When a scripted replica counts as exited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Once the clock has passed the end of its delta list.
    Exhausted,
    /// Once it has retired this many instructions. Ticks past the end of the
    /// delta list retire nothing, so an unreachable length models a hang.
    AtLength(u64),
    /// At this tick, whatever its count.
    AtTick(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedReplica {
    pub deltas: Vec<u64>,
    pub termination: Termination,
    pub suspend_latency_ticks: u64,
    /// When false the replica keeps retiring while "suspended" (used to replay
    /// recorded counts verbatim).
    pub honors_suspension: bool,
    pub exit_status: ExitStatus,
}

impl ScriptedReplica {
    pub fn new(deltas: Vec<u64>) -> Self {
        ScriptedReplica {
            deltas,
            termination: Termination::Exhausted,
            suspend_latency_ticks: 0,
            honors_suspension: true,
            exit_status: ExitStatus::Success,
        }
    }

    pub fn with_length(mut self, length: u64) -> Self {
        self.termination = Termination::AtLength(length);
        self
    }

    pub fn with_latency(mut self, ticks: u64) -> Self {
        self.suspend_latency_ticks = ticks;
        self
    }

    pub fn with_exit_status(mut self, status: ExitStatus) -> Self {
        self.exit_status = status;
        self
    }
}

#[derive(Debug, Clone)]
struct ReplicaState {
    handle: ReplicaHandle,
    spec: ScriptedReplica,
    count: u64,
    running: bool,
    /// Last tick on which a pending suspension still lets the replica run.
    stop_after: Option<u64>,
    /// Ticks on which the replica retires nothing regardless of state.
    frozen: Vec<(u64, u64)>,
    killed: bool,
}

impl ReplicaState {
    fn finished(&self, tick: u64) -> bool {
        match self.spec.termination {
            Termination::Exhausted => tick >= self.spec.deltas.len() as u64,
            Termination::AtLength(n) => self.count >= n,
            Termination::AtTick(k) => tick >= k,
        }
    }

    fn exit(&self, tick: u64) -> Option<ExitStatus> {
        if self.killed {
            Some(ExitStatus::Failure(FailureCause::Crash {
                signal: libc::SIGKILL,
            }))
        } else if self.finished(tick) {
            Some(self.spec.exit_status)
        } else {
            None
        }
    }

    fn is_frozen(&self, tick: u64) -> bool {
        self.frozen.iter().any(|&(from, to)| tick > from && tick <= to)
    }
}

/// Scripted [`ProgressSource`]: virtual time, exact counts.
#[derive(Debug, Clone)]
pub struct ScriptedSource {
    tick: u64,
    tick_len: Duration,
    timestamps: Option<Vec<u64>>,
    replicas: Vec<ReplicaState>,
}

impl ScriptedSource {
    pub fn new(tick_len: Duration) -> Self {
        assert!(!tick_len.is_zero(), "tick length must be positive");
        ScriptedSource {
            tick: 0,
            tick_len,
            timestamps: None,
            replicas: Vec::new(),
        }
    }

    pub fn add_replica(&mut self, role: Role, spec: ScriptedReplica, start_suspended: bool) -> ReplicaHandle {
        let handle = ReplicaHandle::new(role);
        self.replicas.push(ReplicaState {
            handle,
            spec,
            count: 0,
            running: !start_suspended,
            stop_after: None,
            frozen: Vec::new(),
            killed: false,
        });
        handle
    }

    /// Builds a source that reproduces the counts and timestamps of a
    /// recorded trace whose samples were taken one tick apart.
    ///
    /// Replayed replicas ignore suspension, so the recorded counts come back
    /// exactly no matter what the monitor decides.
    pub fn replay(samples: &[StaggeringSample], period: Duration) -> Result<(Self, ReplicaHandle, ReplicaHandle)> {
        let mut head = Vec::with_capacity(samples.len());
        let mut trail = Vec::with_capacity(samples.len());
        let (mut last_head, mut last_trail) = (0u64, 0u64);
        let mut head_done = None;
        let mut trail_done = None;
        for (i, s) in samples.iter().enumerate() {
            if s.interval_index != i as u64 + 1 {
                return Err(Error::InvalidSchedule(format!(
                    "replay needs contiguous intervals starting at 1, found {} at position {i}",
                    s.interval_index
                )));
            }
            if s.head_count < last_head || s.trail_count < last_trail {
                return Err(Error::InvalidSchedule(format!(
                    "counts decrease at interval {}",
                    s.interval_index
                )));
            }
            head.push(s.head_count - last_head);
            trail.push(s.trail_count - last_trail);
            last_head = s.head_count;
            last_trail = s.trail_count;
            match s.action {
                Action::HeadDone => head_done = head_done.or(Some(s.interval_index)),
                Action::TrailDone => trail_done = trail_done.or(Some(s.interval_index)),
                _ => {}
            }
        }
        let spec = |deltas, done: Option<u64>| ScriptedReplica {
            deltas,
            termination: Termination::AtTick(done.unwrap_or(u64::MAX)),
            suspend_latency_ticks: 0,
            honors_suspension: false,
            exit_status: ExitStatus::Success,
        };
        let mut source = ScriptedSource::new(period);
        source.timestamps = Some(samples.iter().map(|s| s.timestamp_ns).collect());
        let h = source.add_replica(Role::Head, spec(head, head_done), false);
        let t = source.add_replica(Role::Trail, spec(trail, trail_done), true);
        Ok((source, h, t))
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn tick_len(&self) -> Duration {
        self.tick_len
    }

    /// Advances the clock by one tick.
    pub fn step(&mut self) {
        self.tick += 1;
        let t = self.tick;
        for r in &mut self.replicas {
            if r.exit(t - 1).is_some() {
                continue;
            }
            if let Some(last) = r.stop_after {
                if t > last {
                    r.running = false;
                    r.stop_after = None;
                }
            }
            if (r.running || !r.spec.honors_suspension) && !r.is_frozen(t) {
                let delta = r.spec.deltas.get((t - 1) as usize).copied().unwrap_or(0);
                r.count = r.count.saturating_add(delta);
                if let Termination::AtLength(n) = r.spec.termination {
                    r.count = r.count.min(n);
                }
            }
        }
    }

    /// Makes `replica` retire nothing on ticks `from_tick+1..=from_tick+ticks`.
    pub fn freeze(&mut self, replica: ReplicaHandle, from_tick: u64, ticks: u64) -> Result<()> {
        let r = self.state_mut(replica)?;
        r.frozen.push((from_tick, from_tick.saturating_add(ticks)));
        Ok(())
    }

    /// Number of whole ticks covering `d` (at least one).
    pub fn ticks_for(&self, d: Duration) -> u64 {
        let n = d.as_nanos().div_ceil(self.tick_len.as_nanos());
        (n as u64).max(1)
    }

    fn state(&self, replica: ReplicaHandle) -> Result<&ReplicaState> {
        self.replicas
            .iter()
            .find(|r| r.handle == replica)
            .ok_or(Error::StaleHandle(replica.id))
    }

    fn state_mut(&mut self, replica: ReplicaHandle) -> Result<&mut ReplicaState> {
        self.replicas
            .iter_mut()
            .find(|r| r.handle == replica)
            .ok_or(Error::StaleHandle(replica.id))
    }
}

impl ProgressSource for ScriptedSource {
    fn backend_name(&self) -> String {
        "scripted".to_string()
    }

    fn read_count(&mut self, replica: ReplicaHandle) -> Result<u64> {
        Ok(self.state(replica)?.count)
    }

    fn suspend(&mut self, replica: ReplicaHandle) -> Result<()> {
        let tick = self.tick;
        let r = self.state_mut(replica)?;
        if r.exit(tick).is_some() || !r.running || r.stop_after.is_some() {
            return Ok(());
        }
        r.stop_after = Some(tick + r.spec.suspend_latency_ticks);
        Ok(())
    }

    fn resume(&mut self, replica: ReplicaHandle) -> Result<()> {
        let tick = self.tick;
        let r = self.state_mut(replica)?;
        if r.exit(tick).is_none() {
            r.running = true;
            r.stop_after = None;
        }
        Ok(())
    }

    fn kill(&mut self, replica: ReplicaHandle) -> Result<()> {
        let tick = self.tick;
        let r = self.state_mut(replica)?;
        if r.exit(tick).is_none() {
            r.killed = true;
        }
        Ok(())
    }

    fn is_terminated(&mut self, replica: ReplicaHandle) -> Result<Option<ExitStatus>> {
        let tick = self.tick;
        Ok(self.state(replica)?.exit(tick))
    }

    fn now_ns(&self) -> u64 {
        match &self.timestamps {
            Some(ts) if self.tick > 0 => ts
                .get((self.tick - 1) as usize)
                .or(ts.last())
                .copied()
                .unwrap_or(0),
            Some(_) => 0,
            None => self.tick * self.tick_len.as_nanos() as u64,
        }
    }

    fn wait(&mut self, period: Duration) {
        for _ in 0..self.ticks_for(period) {
            self.step();
        }
    }
}

/// A head/trail script as read from a scenario file.
///
/// The file is CSV with a `tick,head_delta,trail_delta` header and one row
/// per tick, ticks numbered from 1. Lines starting with `#!` set options:
/// `tick_us`, `suspend_latency_ticks`, `head_length` and `trail_length`.
/// Other lines starting with `#` are comments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub tick: Duration,
    pub head: ScriptedReplica,
    pub trail: ScriptedReplica,
}

pub const SCENARIO_HEADER: &str = "tick,head_delta,trail_delta";

impl Scenario {
    pub fn new(tick: Duration, head_deltas: Vec<u64>, trail_deltas: Vec<u64>) -> Self {
        Scenario {
            tick,
            head: ScriptedReplica::new(head_deltas),
            trail: ScriptedReplica::new(trail_deltas),
        }
    }

    /// A fresh source with the head runnable and the trail created suspended.
    pub fn to_source(&self) -> (ScriptedSource, ReplicaHandle, ReplicaHandle) {
        let mut source = ScriptedSource::new(self.tick);
        let h = source.add_replica(Role::Head, self.head.clone(), false);
        let t = source.add_replica(Role::Trail, self.trail.clone(), true);
        (source, h, t)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tick_us = 1000u64;
        let mut latency = 0u64;
        let mut head_length = None;
        let mut trail_length = None;
        let mut head = Vec::new();
        let mut trail = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.trim();
            if let Some(directive) = line.strip_prefix("#!") {
                let (key, value) = directive
                    .split_once('=')
                    .ok_or_else(|| Error::parse(line_no, "expected #!key=value"))?;
                let value: u64 = value
                    .trim()
                    .parse()
                    .map_err(|e| Error::parse(line_no, format!("{}: {e}", key.trim())))?;
                match key.trim() {
                    "tick_us" if value > 0 => tick_us = value,
                    "tick_us" => return Err(Error::parse(line_no, "tick_us must be positive")),
                    "suspend_latency_ticks" => latency = value,
                    "head_length" => head_length = Some(value),
                    "trail_length" => trail_length = Some(value),
                    other => return Err(Error::parse(line_no, format!("unknown option {other:?}"))),
                }
                continue;
            }
            if line.is_empty() || line.starts_with('#') || line == SCENARIO_HEADER {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::parse(line_no, format!("expected 3 fields, found {}", fields.len())));
            }
            let num = |s: &str| -> Result<u64> {
                s.parse()
                    .map_err(|e| Error::parse(line_no, format!("{s:?}: {e}")))
            };
            let tick = num(fields[0])?;
            if tick != head.len() as u64 + 1 {
                return Err(Error::parse(
                    line_no,
                    format!("expected tick {}, found {tick}", head.len() + 1),
                ));
            }
            head.push(num(fields[1])?);
            trail.push(num(fields[2])?);
        }
        let mut scenario = Scenario::new(Duration::from_micros(tick_us), head, trail);
        scenario.head.suspend_latency_ticks = latency;
        scenario.trail.suspend_latency_ticks = latency;
        if let Some(n) = head_length {
            scenario.head.termination = Termination::AtLength(n);
        }
        if let Some(n) = trail_length {
            scenario.trail.termination = Termination::AtLength(n);
        }
        Ok(scenario)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#!tick_us={}", self.tick.as_micros());
        let _ = writeln!(out, "#!suspend_latency_ticks={}", self.trail.suspend_latency_ticks);
        for (key, replica) in [("head_length", &self.head), ("trail_length", &self.trail)] {
            if let Termination::AtLength(n) = replica.termination {
                let _ = writeln!(out, "#!{key}={n}");
            }
        }
        out.push_str(SCENARIO_HEADER);
        out.push('\n');
        let ticks = self.head.deltas.len().max(self.trail.deltas.len());
        for i in 0..ticks {
            let h = self.head.deltas.get(i).copied().unwrap_or(0);
            let t = self.trail.deltas.get(i).copied().unwrap_or(0);
            let _ = writeln!(out, "{},{h},{t}", i + 1);
        }
        out
    }
}
