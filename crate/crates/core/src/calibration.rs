//! Choosing a threshold for the platform at hand.
//!
//! In the worst case the head stalls right after a check while the trail
//! runs flat out. The trail then keeps retiring instructions until the next
//! check notices (one period) and until the suspension actually bites (the
//! monitor latency). The threshold has to cover that distance:
//!
//! ```text
//! threshold = ceil(peak_rate * (check_period + monitor_latency) * margin)
//! ```
//!
//! ```
//! use std::time::Duration;
//! use softdr::calibration::recommend_threshold;
//!
//! let t = recommend_threshold(2.6e9, Duration::from_millis(1), Duration::ZERO, 1.0);
//! assert_eq!(t, 2_600_000);
//! ```

use std::fmt::Write as _;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::progress::{CounterEvent, ExitStatus, ProcessSource, ProgressSource, ReplicaHandle, Scenario, ScriptedSource};
use crate::verdict::Role;
use crate::workloads::spin_forever;

pub const DEFAULT_SAFETY_MARGIN: f64 = 2.0;

/// Polls before [`measure_monitor_latency`] gives up on a suspension.
const MAX_FREEZE_POLLS: u32 = 100_000;

/// `ceil(peak_rate * (check_period + monitor_latency) * safety_margin)`.
///
/// Non-decreasing in every argument. Nonsensical inputs (negative or NaN
/// rate) give 0.
pub fn recommend_threshold(peak_rate: f64, check_period: Duration, monitor_latency: Duration, safety_margin: f64) -> u64 {
    let window_ns = (check_period + monitor_latency).as_nanos() as f64;
    (peak_rate * window_ns * safety_margin / 1e9).ceil() as u64
}

/// Outcome of a calibration run.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    /// Highest observed instructions per second.
    pub peak_rate: f64,
    /// Worst observed time from a suspend decision to a frozen count.
    pub monitor_latency: Duration,
    pub check_period: Duration,
    pub safety_margin: f64,
    pub recommended_threshold: u64,
    pub backend: String,
}

impl CalibrationReport {
    pub fn new(peak_rate: f64, monitor_latency: Duration, check_period: Duration, safety_margin: f64, backend: impl Into<String>) -> Self {
        CalibrationReport {
            peak_rate,
            monitor_latency,
            check_period,
            safety_margin,
            recommended_threshold: recommend_threshold(peak_rate, check_period, monitor_latency, safety_margin),
            backend: backend.into(),
        }
    }

    /// Whether the stored threshold matches the formula over the other fields.
    pub fn is_consistent(&self) -> bool {
        self.safety_margin >= 1.0
            && self.recommended_threshold
                == recommend_threshold(self.peak_rate, self.check_period, self.monitor_latency, self.safety_margin)
    }

    /// Flat `key=value` text, one pair per line.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "backend={}", self.backend);
        let _ = writeln!(out, "peak_rate={}", self.peak_rate);
        let _ = writeln!(out, "monitor_latency_ns={}", self.monitor_latency.as_nanos());
        let _ = writeln!(out, "check_period_ns={}", self.check_period.as_nanos());
        let _ = writeln!(out, "safety_margin={}", self.safety_margin);
        let _ = writeln!(out, "recommended_threshold={}", self.recommended_threshold);
        out
    }

    /// Parses [`to_key_values`](Self::to_key_values) output. Blank lines and
    /// `#` comments are ignored; the threshold must agree with the formula.
    pub fn parse(text: &str) -> Result<Self> {
        let mut backend = None;
        let mut peak_rate = None;
        let mut latency = None;
        let mut period = None;
        let mut margin = None;
        let mut threshold = None;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(line_no, "expected key=value"))?;
            let value = value.trim();
            let float = || -> Result<f64> {
                value
                    .parse()
                    .map_err(|e| Error::parse(line_no, format!("{key}: {e}")))
            };
            let int = || -> Result<u64> {
                value
                    .parse()
                    .map_err(|e| Error::parse(line_no, format!("{key}: {e}")))
            };
            match key.trim() {
                "backend" => backend = Some(value.to_string()),
                "peak_rate" => peak_rate = Some(float()?),
                "monitor_latency_ns" => latency = Some(Duration::from_nanos(int()?)),
                "check_period_ns" => period = Some(Duration::from_nanos(int()?)),
                "safety_margin" => margin = Some(float()?),
                "recommended_threshold" => threshold = Some(int()?),
                other => return Err(Error::parse(line_no, format!("unknown key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::parse(0, format!("missing key {k}"));
        let report = CalibrationReport {
            peak_rate: peak_rate.ok_or_else(|| missing("peak_rate"))?,
            monitor_latency: latency.ok_or_else(|| missing("monitor_latency_ns"))?,
            check_period: period.ok_or_else(|| missing("check_period_ns"))?,
            safety_margin: margin.ok_or_else(|| missing("safety_margin"))?,
            recommended_threshold: threshold.ok_or_else(|| missing("recommended_threshold"))?,
            backend: backend.unwrap_or_default(),
        };
        if !report.is_consistent() {
            return Err(Error::parse(0, "recommended_threshold does not match the other fields"));
        }
        Ok(report)
    }
}

/// Highest instruction rate of `replica` over consecutive windows of
/// `window` within `duration`, in instructions per second.
///
/// The replica is resumed first and left running.
pub fn measure_peak_rate(source: &mut dyn ProgressSource, replica: ReplicaHandle, duration: Duration, window: Duration) -> Result<f64> {
    if window.is_zero() || duration < window {
        return Err(Error::Calibration(format!(
            "window {window:?} must be non-zero and no longer than duration {duration:?}"
        )));
    }
    source.resume(replica)?;
    let windows = (duration.as_nanos() / window.as_nanos()).max(1);
    let mut peak = 0.0f64;
    let mut t0 = source.now_ns();
    let mut c0 = source.read_count(replica)?;
    for _ in 0..windows {
        source.wait(window);
        let c1 = source.read_count(replica)?;
        let t1 = source.now_ns();
        ensure_alive(source, replica)?;
        if t1 > t0 {
            let rate = c1.saturating_sub(c0) as f64 * 1e9 / (t1 - t0) as f64;
            peak = peak.max(rate);
        }
        (t0, c0) = (t1, c1);
    }
    Ok(peak)
}

/// Worst observed delay between a suspend request and the replica's count
/// freezing, over `samples` cycles.
///
/// Each cycle lets the replica run for `step`, requests suspension, then
/// reads the count every `step` until two consecutive reads agree; the
/// latency is the time of the first of those two reads. The result is thus
/// quantised to `step`.
pub fn measure_monitor_latency(source: &mut dyn ProgressSource, replica: ReplicaHandle, samples: u32, step: Duration) -> Result<Duration> {
    let mut worst = Duration::ZERO;
    for _ in 0..samples {
        source.resume(replica)?;
        source.wait(step);
        ensure_alive(source, replica)?;
        let t0 = source.now_ns();
        source.suspend(replica)?;
        let mut t_read = source.now_ns();
        let mut c1 = source.read_count(replica)?;
        let mut polls = 0;
        loop {
            source.wait(step);
            let c2 = source.read_count(replica)?;
            if c2 == c1 {
                break;
            }
            polls += 1;
            if polls == MAX_FREEZE_POLLS {
                return Err(Error::Calibration("replica count never froze after suspension".into()));
            }
            t_read = source.now_ns();
            c1 = c2;
        }
        worst = worst.max(Duration::from_nanos(t_read.saturating_sub(t0)));
    }
    source.resume(replica)?;
    Ok(worst)
}

fn ensure_alive(source: &mut dyn ProgressSource, replica: ReplicaHandle) -> Result<()> {
    match source.is_terminated(replica)? {
        None => Ok(()),
        Some(ExitStatus::Failure(cause)) => Err(Error::ReplicaFailure {
            role: replica.role,
            cause,
        }),
        Some(ExitStatus::Success) => Err(Error::Calibration("calibration replica exited early".into())),
    }
}

/// Knobs for [`calibrate`] and [`calibrate_scripted`].
#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    /// Total time spent measuring the peak rate.
    pub duration: Duration,
    /// Length of one rate window.
    pub window: Duration,
    /// Suspend/freeze cycles for the latency estimate.
    pub samples: u32,
    /// Polling step while waiting for a count to freeze.
    pub step: Duration,
    pub check_period: Duration,
    pub safety_margin: f64,
    /// Core for the synthetic replica (the trail core, normally).
    pub core: Option<usize>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            duration: Duration::from_millis(500),
            window: Duration::from_millis(10),
            samples: 100,
            step: Duration::from_micros(50),
            check_period: Duration::from_millis(1),
            safety_margin: DEFAULT_SAFETY_MARGIN,
            core: None,
        }
    }
}

impl CalibrationOptions {
    fn validate(&self) -> Result<()> {
        if self.safety_margin.is_nan() || self.safety_margin < 1.0 {
            return Err(Error::Calibration(format!("margin must be ≥ 1 (got {})", self.safety_margin)));
        }
        if self.check_period.is_zero() || self.step.is_zero() {
            return Err(Error::Calibration("check period and step must be positive".into()));
        }
        Ok(())
    }
}

/// Calibrates against a forked busy-loop replica counted with `event`.
pub fn calibrate(event: CounterEvent, options: &CalibrationOptions) -> Result<CalibrationReport> {
    options.validate()?;
    if options.duration < Duration::from_millis(100) {
        return Err(Error::Calibration("peak-rate duration must be at least 100 ms".into()));
    }
    let mut source = ProcessSource::new(event);
    let replica = source.spawn(Role::Trail, options.core, true, || {}, || -> i32 { spin_forever() })?;
    let result = measure(&mut source, replica, options);
    source.release_all();
    let (rate, latency) = result?;
    Ok(CalibrationReport::new(
        rate,
        latency,
        options.check_period,
        options.safety_margin,
        format!("os:{event}"),
    ))
}

/// Calibrates against the trail of a scripted scenario. The trail's deltas
/// are repeated as often as the measurement needs.
pub fn calibrate_scripted(scenario: &Scenario, options: &CalibrationOptions) -> Result<CalibrationReport> {
    options.validate()?;
    if scenario.trail.deltas.is_empty() {
        return Err(Error::Calibration("scenario has no trail ticks".into()));
    }
    let mut source = ScriptedSource::new(scenario.tick);
    let latency_ticks = scenario.trail.suspend_latency_ticks;
    let step_ticks = source.ticks_for(options.step);
    let needed = source.ticks_for(options.duration)
        + u64::from(options.samples) * step_ticks * (latency_ticks + 4)
        + 16;
    let mut spec = scenario.trail.clone();
    spec.deltas = spec.deltas.iter().copied().cycle().take(needed as usize).collect();
    spec.termination = crate::progress::Termination::Exhausted;
    let replica = source.add_replica(Role::Trail, spec, true);
    let (rate, latency) = measure(&mut source, replica, options)?;
    Ok(CalibrationReport::new(
        rate,
        latency,
        options.check_period,
        options.safety_margin,
        "scripted",
    ))
}

fn measure(source: &mut dyn ProgressSource, replica: ReplicaHandle, options: &CalibrationOptions) -> Result<(f64, Duration)> {
    let rate = measure_peak_rate(source, replica, options.duration, options.window)?;
    let latency = measure_monitor_latency(source, replica, options.samples, options.step)?;
    Ok((rate, latency))
}
