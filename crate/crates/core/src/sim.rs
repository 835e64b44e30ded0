//! Discrete-time model of the staggering protocol.
//!
//! Time advances in ticks. On tick `t` (numbered from 1) every running
//! replica retires `deltas[t - 1]` instructions. Every `period_ticks` ticks the
//! monitor samples both counts and acts exactly as the enforcement loop does.
//! A suspension decided at tick `k` still lets the trail run on ticks
//! `k+1..=k+latency`; a resume decided at tick `k` takes effect on tick `k+1`.
//! The trail starts suspended.
//!
//! Besides the sampled staggering, the model records the staggering after
//! every tick while the head is alive, so a dip between two checks is not
//! missed.
//!
//! ```
//! use softdr::sim::{exhaustive_check, Verdict};
//!
//! // Rates 0..=2 per tick, check every tick, one tick of suspend latency.
//! assert!(matches!(exhaustive_check(&[0, 1, 2], 6, 1, 1, 4).unwrap(), Verdict::Safe { .. }));
//! assert!(matches!(exhaustive_check(&[0, 1, 2], 6, 1, 1, 3).unwrap(), Verdict::Counterexample { .. }));
//! ```

use std::time::Duration;

use crate::config::MonitorConfig;
use crate::error::{Error, Result};
use crate::progress::{Scenario, ScriptedReplica};
use crate::staggering::{decide, Action, Decision, TrailState};

/// Most schedules [`exhaustive_check`] will enumerate.
pub const SEARCH_LIMIT: u128 = 10_000_000;

/// Per-tick instruction deltas for both replicas plus monitor timing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub head_deltas: Vec<u64>,
    pub trail_deltas: Vec<u64>,
    pub period_ticks: u64,
    pub suspend_latency_ticks: u64,
    /// Instructions the head needs to finish. `None`: it finishes after the
    /// last scheduled tick.
    pub head_length: Option<u64>,
    pub trail_length: Option<u64>,
}

impl Schedule {
    pub fn new(head_deltas: Vec<u64>, trail_deltas: Vec<u64>, period_ticks: u64, suspend_latency_ticks: u64) -> Result<Self> {
        let s = Schedule {
            head_deltas,
            trail_deltas,
            period_ticks,
            suspend_latency_ticks,
            head_length: None,
            trail_length: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_lengths(mut self, head: Option<u64>, trail: Option<u64>) -> Self {
        self.head_length = head;
        self.trail_length = trail;
        self
    }

    pub fn ticks(&self) -> u64 {
        self.head_deltas.len() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.period_ticks == 0 {
            return Err(Error::InvalidSchedule("period_ticks must be at least 1".into()));
        }
        if self.head_deltas.len() != self.trail_deltas.len() {
            return Err(Error::InvalidSchedule(format!(
                "head has {} ticks, trail has {}",
                self.head_deltas.len(),
                self.trail_deltas.len()
            )));
        }
        Ok(())
    }

    /// Largest per-tick trail delta.
    pub fn trail_peak(&self) -> u64 {
        self.trail_deltas.iter().copied().max().unwrap_or(0)
    }

    /// Number of checks after which the model stops even if a replica has
    /// not finished. Nothing moves after the last scheduled tick, so a
    /// replica that has not finished by then never will.
    pub fn horizon_checks(&self) -> u64 {
        self.ticks().div_ceil(self.period_ticks) + 2
    }

    /// The same schedule as a scripted-backend scenario with ticks of `tick`.
    pub fn to_scenario(&self, tick: Duration) -> Scenario {
        let replica = |deltas: &[u64], length: Option<u64>| {
            let r = ScriptedReplica::new(deltas.to_vec()).with_latency(self.suspend_latency_ticks);
            match length {
                Some(n) => r.with_length(n),
                None => r,
            }
        };
        Scenario {
            tick,
            head: replica(&self.head_deltas, self.head_length),
            trail: replica(&self.trail_deltas, self.trail_length),
        }
    }

    /// A monitor configuration that, on [`to_scenario`](Self::to_scenario)
    /// with the same `tick`, checks when the model does and stops at the
    /// model's horizon.
    pub fn monitor_config(&self, threshold: u64, tick: Duration) -> MonitorConfig {
        let period = tick * self.period_ticks as u32;
        MonitorConfig::new(threshold)
            .with_check_period(period)
            .with_timeout(period * self.horizon_checks() as u32)
    }

    /// Scenario CSV with the monitor timing in leading comments.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# period_ticks={}\n# suspend_latency_ticks={}\n",
            self.period_ticks, self.suspend_latency_ticks
        );
        out.push_str(&self.to_scenario(Duration::from_millis(1)).to_csv());
        out
    }
}

/// One monitor check in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimSample {
    pub tick: u64,
    pub head_count: u64,
    pub trail_count: u64,
    pub staggering: i64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimTrace {
    pub samples: Vec<SimSample>,
    /// `(tick, staggering)` after every tick during which the head was alive.
    pub instants: Vec<(u64, i64)>,
    /// Whether both replicas finished before the horizon.
    pub completed: bool,
}

impl SimTrace {
    pub fn sampled_staggering(&self) -> Vec<i64> {
        self.samples.iter().map(|s| s.staggering).collect()
    }
}

/// Runs the model to completion or to [`Schedule::horizon_checks`].
pub fn simulate(schedule: &Schedule, threshold: u64) -> Result<SimTrace> {
    schedule.validate()?;
    let mut trace = SimTrace {
        samples: Vec::new(),
        instants: Vec::new(),
        completed: false,
    };
    trace.completed = run_model(schedule, threshold, &mut trace);
    Ok(trace)
}

/// Minimum staggering over all modelled instants while the head was alive.
pub fn min_staggering(trace: &SimTrace) -> Result<i64> {
    trace.instants.iter().map(|&(_, s)| s).min().ok_or(Error::EmptyTrace)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Safe { schedules: u128 },
    Counterexample { schedule: Schedule, min_staggering: i64 },
}

/// Tries every head/trail assignment of `alphabet` rates over `ticks` ticks
/// and returns the first one whose minimum staggering is negative.
pub fn exhaustive_check(alphabet: &[u64], ticks: usize, period_ticks: u64, suspend_latency_ticks: u64, threshold: u64) -> Result<Verdict> {
    let mut symbols = alphabet.to_vec();
    symbols.sort_unstable();
    symbols.dedup();
    if symbols.is_empty() {
        return Err(Error::InvalidSchedule("empty rate alphabet".into()));
    }
    let schedules = u32::try_from(2 * ticks)
        .ok()
        .and_then(|e| (symbols.len() as u128).checked_pow(e))
        .unwrap_or(u128::MAX);
    if schedules > SEARCH_LIMIT {
        return Err(Error::SearchSpaceTooLarge {
            schedules,
            limit: SEARCH_LIMIT,
        });
    }

    let mut schedule = Schedule::new(vec![symbols[0]; ticks], vec![symbols[0]; ticks], period_ticks, suspend_latency_ticks)?;
    // Odometer over 2 * ticks digits: head ticks first, then trail ticks.
    let mut digits = vec![0usize; 2 * ticks];
    loop {
        let mut min = MinOnly(None);
        run_model(&schedule, threshold, &mut min);
        if let Some(m) = min.0.filter(|&m| m < 0) {
            return Ok(Verdict::Counterexample {
                schedule,
                min_staggering: m,
            });
        }
        let mut i = 0;
        loop {
            if i == digits.len() {
                return Ok(Verdict::Safe { schedules });
            }
            digits[i] += 1;
            let wrapped = digits[i] == symbols.len();
            if wrapped {
                digits[i] = 0;
            }
            let value = symbols[digits[i]];
            if i < ticks {
                schedule.head_deltas[i] = value;
            } else {
                schedule.trail_deltas[i - ticks] = value;
            }
            if !wrapped {
                break;
            }
            i += 1;
        }
    }
}

trait Observer {
    fn instant(&mut self, tick: u64, staggering: i64);
    fn sample(&mut self, _sample: SimSample) {}
}

impl Observer for SimTrace {
    fn instant(&mut self, tick: u64, staggering: i64) {
        self.instants.push((tick, staggering));
    }

    fn sample(&mut self, sample: SimSample) {
        self.samples.push(sample);
    }
}

struct MinOnly(Option<i64>);

impl Observer for MinOnly {
    fn instant(&mut self, _tick: u64, staggering: i64) {
        self.0 = Some(self.0.map_or(staggering, |m| m.min(staggering)));
    }
}

struct Model<'a> {
    deltas: &'a [u64],
    length: Option<u64>,
    count: u64,
    running: bool,
    stop_after: Option<u64>,
}

impl Model<'_> {
    fn finished(&self, tick: u64) -> bool {
        match self.length {
            Some(n) => self.count >= n,
            None => tick >= self.deltas.len() as u64,
        }
    }

    fn advance(&mut self, tick: u64) {
        if self.finished(tick - 1) {
            return;
        }
        if self.stop_after.is_some_and(|last| tick > last) {
            self.running = false;
            self.stop_after = None;
        }
        if self.running {
            let d = self.deltas.get(tick as usize - 1).copied().unwrap_or(0);
            self.count = self.count.saturating_add(d);
            if let Some(n) = self.length {
                self.count = self.count.min(n);
            }
        }
    }
}

fn signed(h: u64, t: u64) -> i64 {
    (i128::from(h) - i128::from(t)).clamp(i64::MIN as i128, i64::MAX as i128) as i64
}

/// Returns whether both replicas finished within the horizon.
fn run_model<O: Observer>(s: &Schedule, threshold: u64, obs: &mut O) -> bool {
    let mut head = Model {
        deltas: &s.head_deltas,
        length: s.head_length,
        count: 0,
        running: true,
        stop_after: None,
    };
    let mut trail = Model {
        deltas: &s.trail_deltas,
        length: s.trail_length,
        count: 0,
        running: false,
        stop_after: None,
    };
    let mut state = TrailState::Suspended;
    let (mut head_done, mut trail_done) = (false, false);
    let mut t = 0u64;

    for _ in 0..s.horizon_checks() {
        for _ in 0..s.period_ticks {
            t += 1;
            let head_alive = !head.finished(t - 1);
            head.advance(t);
            trail.advance(t);
            if head_alive {
                obs.instant(t, signed(head.count, trail.count));
            }
        }

        let stagger = signed(head.count, trail.count);
        let head_exit = !head_done && head.finished(t);
        let trail_exit = !trail_done && !head_exit && trail.finished(t);
        let suspend = |trail: &mut Model| {
            if !trail.finished(t) && trail.running && trail.stop_after.is_none() {
                trail.stop_after = Some(t + s.suspend_latency_ticks);
            }
        };
        let resume = |trail: &mut Model| {
            if !trail.finished(t) {
                trail.running = true;
                trail.stop_after = None;
            }
        };

        let action = if head_exit {
            head_done = true;
            if !trail_done && state == TrailState::Suspended {
                resume(&mut trail);
                state = TrailState::Running;
            }
            Action::HeadDone
        } else if trail_exit {
            trail_done = true;
            Action::TrailDone
        } else if head_done || trail_done {
            Action::None
        } else if stagger < 0 {
            if state == TrailState::Running {
                suspend(&mut trail);
                state = TrailState::Suspended;
            }
            Action::DiversityLoss
        } else {
            let d = decide(stagger, threshold, state);
            match d {
                Decision::Suspend => {
                    suspend(&mut trail);
                    state = TrailState::Suspended;
                }
                Decision::Resume => {
                    resume(&mut trail);
                    state = TrailState::Running;
                }
                Decision::None => {}
            }
            d.into()
        };
        obs.sample(SimSample {
            tick: t,
            head_count: head.count,
            trail_count: trail.count,
            staggering: stagger,
            action,
        });
        if head_done && trail_done {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(h: &[u64], t: &[u64], p: u64, l: u64) -> Schedule {
        Schedule::new(h.to_vec(), t.to_vec(), p, l).unwrap()
    }

    #[test]
    fn equal_rates_settle_at_threshold() {
        let r = 5;
        let trace = simulate(&sched(&[r; 8], &[r; 8], 1, 0), 2 * r).unwrap();
        let s = &trace.samples;
        assert_eq!(s[0].action, Action::None);
        assert_eq!(s[1].action, Action::Resume);
        assert_eq!(s[1].tick, 2);
        for x in &s[1..7] {
            assert_eq!(x.staggering, 2 * r as i64);
        }
        assert!(trace.completed);
        assert_eq!(min_staggering(&trace).unwrap(), r as i64);
    }

    #[test]
    fn stalled_head_worst_case_reaches_zero() {
        // Head runs 4 ticks at 2 then stalls; trail at 2 per tick; T = 2 * (1 + 1).
        let h = [2, 2, 2, 2, 0, 0, 0, 0, 0, 0];
        let trace = simulate(&sched(&h, &[2; 10], 1, 1), 4).unwrap();
        assert_eq!(min_staggering(&trace).unwrap(), 0);
    }

    #[test]
    fn frozen_trail_tracks_head() {
        let h = [3, 0, 1, 4, 0, 2];
        let trace = simulate(&sched(&h, &[0; 6], 1, 0), 5).unwrap();
        let mut sum = 0;
        for (i, &(_, s)) in trace.instants.iter().enumerate() {
            sum += h[i] as i64;
            assert_eq!(s, sum);
        }
        assert!(trace.instants.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn min_staggering_examples() {
        let t = |v: &[i64]| SimTrace {
            samples: Vec::new(),
            instants: v.iter().enumerate().map(|(i, &s)| (i as u64 + 1, s)).collect(),
            completed: true,
        };
        assert_eq!(min_staggering(&t(&[100, 84, 150])).unwrap(), 84);
        assert_eq!(min_staggering(&t(&[0])).unwrap(), 0);
        assert_eq!(min_staggering(&t(&[50, -10, 30])).unwrap(), -10);
        assert!(matches!(min_staggering(&t(&[])), Err(Error::EmptyTrace)));
    }

    #[test]
    fn counterexample_is_genuine() {
        match exhaustive_check(&[0, 1, 2], 6, 1, 1, 3).unwrap() {
            Verdict::Counterexample { schedule, min_staggering: m } => {
                assert!(m < 0);
                let trace = simulate(&schedule, 3).unwrap();
                assert_eq!(super::min_staggering(&trace).unwrap(), m);
            }
            v => panic!("expected counterexample, got {v:?}"),
        }
    }

    #[test]
    fn nothing_moves_is_safe() {
        for threshold in [0, 1, 7] {
            assert!(matches!(
                exhaustive_check(&[0], 5, 2, 1, threshold).unwrap(),
                Verdict::Safe { schedules: 1 }
            ));
        }
    }

    #[test]
    fn search_limit() {
        let err = exhaustive_check(&[0, 1, 2], 8, 1, 1, 4).unwrap_err();
        assert!(matches!(err, Error::SearchSpaceTooLarge { schedules: 43_046_721, .. }));
    }

    #[test]
    fn invalid_schedules() {
        assert!(Schedule::new(vec![1], vec![1], 0, 0).is_err());
        assert!(Schedule::new(vec![1, 2], vec![1], 1, 0).is_err());
    }

    #[test]
    fn unreachable_length_stops_at_horizon() {
        let s = sched(&[1; 4], &[1; 4], 2, 0).with_lengths(Some(100), None);
        let trace = simulate(&s, 1).unwrap();
        assert!(!trace.completed);
        assert_eq!(trace.samples.len() as u64, s.horizon_checks());
    }

    #[test]
    fn csv_parses_back() {
        let s = sched(&[2, 0, 1], &[1, 1, 2], 1, 1);
        let back = Scenario::parse(&s.to_csv()).unwrap();
        assert_eq!(back.head.deltas, s.head_deltas);
        assert_eq!(back.trail.deltas, s.trail_deltas);
        assert_eq!(back.trail.suspend_latency_ticks, 1);
    }
}
