//! Monitor configuration and its validation.

use std::fmt;
use std::time::Duration;

/// Default interval between two monitor checks.
pub const DEFAULT_CHECK_PERIOD: Duration = Duration::from_millis(1);

/// How the trail replica is started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StartupPolicy {
    /// The trail is created stopped and only runs once the head is ahead by
    /// at least the threshold.
    #[default]
    TrailSuspendedUntilThreshold,
}

/// What the monitor does when it samples a negative staggering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiversityLossPolicy {
    /// Record the event in the trace, suspend the trail and keep going.
    #[default]
    RecordAndContinue,
    /// Stop the run and report [`Verdict::DiversityLoss`](crate::Verdict::DiversityLoss).
    AbortRun,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonitorConfig {
    /// Minimum staggering to enforce, in retired instructions.
    pub threshold_instructions: u64,
    pub check_period: Duration,
    pub startup_policy: StartupPolicy,
    pub diversity_loss_policy: DiversityLossPolicy,
    pub run_timeout: Option<Duration>,
    pub head_core: Option<usize>,
    pub trail_core: Option<usize>,
    pub monitor_core: Option<usize>,
}

impl MonitorConfig {
    /// A configuration with the given threshold and defaults everywhere else.
    ///
    /// There is no default threshold: the safe value depends on the platform
    /// and should come from [`calibration`](crate::calibration).
    pub fn new(threshold_instructions: u64) -> Self {
        MonitorConfig {
            threshold_instructions,
            check_period: DEFAULT_CHECK_PERIOD,
            startup_policy: StartupPolicy::default(),
            diversity_loss_policy: DiversityLossPolicy::default(),
            run_timeout: None,
            head_core: None,
            trail_core: None,
            monitor_core: None,
        }
    }

    pub fn with_check_period(mut self, period: Duration) -> Self {
        self.check_period = period;
        self
    }

    pub fn with_policy(mut self, policy: DiversityLossPolicy) -> Self {
        self.diversity_loss_policy = policy;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.run_timeout = Some(timeout);
        self
    }

    pub fn with_cores(mut self, head: usize, trail: usize, monitor: usize) -> Self {
        self.head_core = Some(head);
        self.trail_core = Some(trail);
        self.monitor_core = Some(monitor);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    ZeroThreshold,
    ZeroCheckPeriod,
    CoresNotDistinct { first: &'static str, second: &'static str, core: usize },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::ZeroThreshold => f.write_str("threshold must be positive"),
            ConfigError::ZeroCheckPeriod => f.write_str("check period must be positive"),
            ConfigError::CoresNotDistinct {
                first,
                second,
                core,
            } => write!(f, "cores must be distinct ({first} and {second} both on core {core})"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Returns every violated invariant of `config`; an empty list means valid.
///
/// Core identifiers are compared pairwise among those that are set, so a
/// head/trail collision is reported even when no monitor core is given.
pub fn validate_config(config: &MonitorConfig) -> Vec<ConfigError> {
    let mut errors = Vec::new();
    if config.threshold_instructions == 0 {
        errors.push(ConfigError::ZeroThreshold);
    }
    if config.check_period.is_zero() {
        errors.push(ConfigError::ZeroCheckPeriod);
    }
    let cores = [
        ("head", config.head_core),
        ("trail", config.trail_core),
        ("monitor", config.monitor_core),
    ];
    for (i, (first, a)) in cores.iter().enumerate() {
        for (second, b) in &cores[i + 1..] {
            if let (Some(a), Some(b)) = (a, b) {
                if a == b {
                    errors.push(ConfigError::CoresNotDistinct {
                        first,
                        second,
                        core: *a,
                    });
                }
            }
        }
    }
    errors
}
