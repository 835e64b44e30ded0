//! Staggering arithmetic and the monitor's per-check decision rule.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Head count minus trail count, as a signed value.
///
/// Negative results mean the trail is ahead of the head. Nothing is clamped;
/// only a result outside the `i64` range is an error.
pub fn staggering(head_count: u64, trail_count: u64) -> Result<i64> {
    let diff = i128::from(head_count) - i128::from(trail_count);
    i64::try_from(diff).map_err(|_| Error::StaggeringOverflow {
        head: head_count,
        trail: trail_count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrailState {
    Running,
    Suspended,
}

/// Outcome of [`decide`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Suspend,
    Resume,
    None,
}

/// Suspend a running trail whose staggering is strictly below `threshold`,
/// resume a suspended trail once the staggering reaches it.
///
/// A staggering exactly equal to the threshold is not "below" it.
pub fn decide(staggering: i64, threshold: u64, trail: TrailState) -> Decision {
    let below = i128::from(staggering) < i128::from(threshold);
    match (below, trail) {
        (true, TrailState::Running) => Decision::Suspend,
        (false, TrailState::Suspended) => Decision::Resume,
        _ => Decision::None,
    }
}

/// What the monitor did at one check, as recorded in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    None,
    Suspend,
    Resume,
    HeadDone,
    TrailDone,
    DiversityLoss,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::None,
        Action::Suspend,
        Action::Resume,
        Action::HeadDone,
        Action::TrailDone,
        Action::DiversityLoss,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::None => "NONE",
            Action::Suspend => "SUSPEND",
            Action::Resume => "RESUME",
            Action::HeadDone => "HEAD_DONE",
            Action::TrailDone => "TRAIL_DONE",
            Action::DiversityLoss => "DIVERSITY_LOSS",
        }
    }
}

impl From<Decision> for Action {
    fn from(d: Decision) -> Self {
        match d {
            Decision::Suspend => Action::Suspend,
            Decision::Resume => Action::Resume,
            Decision::None => Action::None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Action::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown action {s:?}"))
    }
}

/// One monitor observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StaggeringSample {
    pub interval_index: u64,
    /// Monotonic nanoseconds since the start of the run.
    pub timestamp_ns: u64,
    pub head_count: u64,
    pub trail_count: u64,
    pub staggering: i64,
    pub action: Action,
}

impl StaggeringSample {
    /// Builds a sample, deriving the staggering from the two counts.
    pub fn new(
        interval_index: u64,
        timestamp_ns: u64,
        head_count: u64,
        trail_count: u64,
        action: Action,
    ) -> Result<Self> {
        Ok(StaggeringSample {
            interval_index,
            timestamp_ns,
            head_count,
            trail_count,
            staggering: staggering(head_count, trail_count)?,
            action,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn staggering_examples() {
        assert_eq!(staggering(984_000_000, 900_000_000).unwrap(), 84_000_000);
        assert_eq!(staggering(5, 5).unwrap(), 0);
        assert_eq!(staggering(100, 250).unwrap(), -150);
    }

    #[test]
    fn staggering_overflow_is_an_error() {
        assert!(matches!(
            staggering(u64::MAX, 0),
            Err(Error::StaggeringOverflow { .. })
        ));
        assert_eq!(staggering(i64::MAX as u64, 0).unwrap(), i64::MAX);
        assert_eq!(staggering(0, 1 << 63).unwrap(), i64::MIN);
    }

    #[test]
    fn decide_examples() {
        assert_eq!(
            decide(84_000_000, 150_000_000, TrailState::Running),
            Decision::Suspend
        );
        assert_eq!(
            decide(210_000_000, 150_000_000, TrailState::Suspended),
            Decision::Resume
        );
        assert_eq!(
            decide(150_000_000, 150_000_000, TrailState::Running),
            Decision::None
        );
    }

    #[test]
    fn decide_on_negative_staggering() {
        assert_eq!(decide(-1, 1, TrailState::Running), Decision::Suspend);
        assert_eq!(decide(i64::MIN, 0, TrailState::Suspended), Decision::None);
    }

    #[test]
    fn suspend_iff_below_threshold_exhaustive() {
        for threshold in 0u64..=20 {
            for s in -25i64..=25 {
                let suspend = decide(s, threshold, TrailState::Running) == Decision::Suspend;
                assert_eq!(suspend, s < threshold as i64, "s={s} T={threshold}");
                let resume = decide(s, threshold, TrailState::Suspended) == Decision::Resume;
                assert_eq!(resume, s >= threshold as i64, "s={s} T={threshold}");
            }
        }
    }

    #[test]
    fn action_names_round_trip() {
        for a in Action::ALL {
            assert_eq!(a.as_str().parse::<Action>().unwrap(), a);
        }
        assert!("PAUSE".parse::<Action>().is_err());
    }

    fn any_state() -> impl Strategy<Value = TrailState> {
        prop_oneof![Just(TrailState::Running), Just(TrailState::Suspended)]
    }

    proptest! {
        #[test]
        fn staggering_is_antisymmetric(h in 0u64..=i64::MAX as u64, t in 0u64..=i64::MAX as u64) {
            prop_assert_eq!(staggering(h, t).unwrap() + staggering(t, h).unwrap(), 0);
        }

        #[test]
        fn decide_is_pure_and_legal(s in any::<i64>(), threshold in any::<u64>(), state in any_state()) {
            let d = decide(s, threshold, state);
            prop_assert_eq!(d, decide(s, threshold, state));
            match state {
                TrailState::Suspended => prop_assert_ne!(d, Decision::Suspend),
                TrailState::Running => prop_assert_ne!(d, Decision::Resume),
            }
        }
    }
}
