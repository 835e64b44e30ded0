use std::time::Duration;

use proptest::prelude::*;

use softdr::monitor::{check_samples, enforcement_loop, read_trace, write_trace, LoopEnd, Trace, TraceMetadata};
use softdr::progress::{Scenario, ScriptedReplica, ScriptedSource};
use softdr::{Action, MonitorConfig};

const TICK: Duration = Duration::from_micros(100);

fn scenario(head: Vec<u64>, trail: Vec<u64>) -> Scenario {
    Scenario {
        tick: TICK,
        head: ScriptedReplica::new(head),
        trail: ScriptedReplica::new(trail),
    }
}

fn run(s: &Scenario, threshold: u64, period_ticks: u32) -> Vec<softdr::StaggeringSample> {
    let (mut source, h, t) = s.to_source();
    let config = MonitorConfig::new(threshold).with_check_period(TICK * period_ticks);
    enforcement_loop(h, t, &mut source, &config).unwrap().samples
}

#[test]
fn level_rates_hold_staggering_after_resume() {
    let samples = run(&scenario(vec![100; 12], vec![100; 12]), 150, 1);
    assert_eq!((samples[0].staggering, samples[0].action), (100, Action::None));
    assert_eq!((samples[1].staggering, samples[1].action), (200, Action::Resume));
    for s in &samples[2..11] {
        assert_eq!((s.staggering, s.action), (200, Action::None));
    }
}

#[test]
fn stalled_head_gets_trail_suspended_next_check() {
    // Staggering reaches 200 at tick 2; from tick 3 on the head stalls.
    let mut head = vec![100, 100];
    head.extend([0; 10]);
    let samples = run(&scenario(head, vec![100; 12]), 150, 1);
    assert_eq!(samples[1].action, Action::Resume);
    assert_eq!((samples[2].staggering, samples[2].action), (100, Action::Suspend));
}

#[test]
fn trail_runs_free_after_head_exits() {
    // The head is done after 5 ticks; the trail has work for 40.
    let s = Scenario {
        tick: TICK,
        head: ScriptedReplica::new(vec![50; 5]).with_length(250),
        trail: ScriptedReplica::new(vec![10; 40]).with_length(250),
    };
    let samples = run(&s, 1_000, 1);
    let done = samples.iter().position(|x| x.action == Action::HeadDone).unwrap();
    assert_eq!(done, 4);
    assert!(samples[done + 1..]
        .iter()
        .all(|x| matches!(x.action, Action::None | Action::TrailDone)));
    assert_eq!(samples.last().unwrap().action, Action::TrailDone);
    assert_eq!(samples.last().unwrap().trail_count, 250);
}

#[test]
fn trace_csv_round_trip() {
    let s = scenario(vec![7, 0, 9, 3, 3, 8, 1, 0, 5], vec![4; 9]);
    let samples = run(&s, 6, 2);
    let trace = Trace {
        samples: samples.clone(),
        metadata: TraceMetadata {
            config: MonitorConfig::new(6),
            backend: "scripted".into(),
            started_at: std::time::SystemTime::UNIX_EPOCH,
            finished_at: std::time::SystemTime::UNIX_EPOCH,
        },
    };
    let mut buf = Vec::new();
    write_trace(&trace, &mut buf).unwrap();
    assert_eq!(read_trace(buf.as_slice()).unwrap(), samples);
}

fn arb_scenario() -> impl Strategy<Value = (Scenario, u64, u32, u64)> {
    (1usize..30, 0u64..4).prop_flat_map(|(ticks, latency)| {
        (
            proptest::collection::vec(0u64..6, ticks),
            proptest::collection::vec(0u64..6, ticks),
            0u64..25,
            1u32..4,
            Just(latency),
        )
            .prop_map(|(h, t, threshold, period, latency)| {
                let mut s = scenario(h, t);
                s.trail.suspend_latency_ticks = latency;
                (s, threshold, period, latency)
            })
    })
}

proptest! {
    #[test]
    fn traces_are_well_formed((s, threshold, period, _) in arb_scenario()) {
        let (mut source, h, t) = s.to_source();
        let config = MonitorConfig::new(threshold).with_check_period(TICK * period);
        let report = enforcement_loop(h, t, &mut source, &config).unwrap();
        prop_assert_eq!(&report.end, &LoopEnd::Completed);
        prop_assert!(check_samples(&report.samples).is_ok(), "{:?}", check_samples(&report.samples));
        prop_assert_eq!(report.samples.iter().filter(|x| x.action == Action::HeadDone).count(), 1);
        prop_assert!(report.samples.iter().filter(|x| x.action == Action::TrailDone).count() <= 1);
    }

    #[test]
    fn threshold_covering_one_period_keeps_diversity((s, _, period, latency) in arb_scenario()) {
        let r_max = s.trail.deltas.iter().copied().max().unwrap_or(0);
        let threshold = r_max * (u64::from(period) + latency);
        let (mut source, h, t) = s.to_source();
        let config = MonitorConfig::new(threshold).with_check_period(TICK * period);
        let report = enforcement_loop(h, t, &mut source, &config).unwrap();
        for x in report.samples.iter().take_while(|x| x.action != Action::HeadDone) {
            prop_assert!(x.staggering >= 0, "{:?}", x);
        }
    }

    #[test]
    fn replay_reproduces_the_trace((s, threshold, period, _) in arb_scenario()) {
        let config = MonitorConfig::new(threshold).with_check_period(TICK * period);
        let (mut source, h, t) = s.to_source();
        let first = enforcement_loop(h, t, &mut source, &config).unwrap();
        let (mut replay, h, t) = ScriptedSource::replay(&first.samples, config.check_period).unwrap();
        let again = enforcement_loop(h, t, &mut replay, &config).unwrap();
        prop_assert_eq!(first.samples, again.samples);
    }
}
