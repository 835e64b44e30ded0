//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines always show up in `cargo test` output.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use softdr::calibration::{calibrate, recommend_threshold, CalibrationOptions};
use softdr::monitor::{check_samples, enforcement_loop};
use softdr::progress::{CounterEvent, ProcessSource, ProgressSource, Scenario, ScriptedReplica};
use softdr::replication::run_direct;
use softdr::sim::{exhaustive_check, simulate, Schedule, Verdict as SimVerdict};
use softdr::workloads::{spin_forever, WorkloadId};
use softdr::{
    decide, protect_payload, Action, Backend, Decision, DiversityLossPolicy, FaultSpec, MonitorConfig,
    ProtectOptions, Role, TrailState, Verdict,
};

enum Outcome {
    Pass(String),
    Fail(String),
    /// Not gating: reported, never fails the run.
    Info(String),
    Skip(String),
}

use Outcome::*;

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("pattern reproduction", c1_pattern),
        ("threshold decisions", c2_decisions),
        ("simulator safety and tightness", c3_exhaustive),
        ("monitor/simulator cross-validation", c4_cross_validation),
        ("bit-flip detection", c5_fault_detection),
        ("oracle equivalence", c6_oracle_equivalence),
        ("diversity-loss detection", c7_diversity_loss),
        ("calibration band", c8_calibration),
        ("suspension effectiveness", c9_suspension),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = check();
        let (tag, detail) = match outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Info(d) => ("INFO", d),
            Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] criterion {}: {name}: {detail}", i + 1);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn c1_pattern() -> Outcome {
    let start = Instant::now();
    const M: u64 = 1_000_000;
    let threshold = 150 * M;
    // 1 ms ticks, 30 ms check period, 2.6M instructions per tick at full
    // speed. The head nearly stalls in the third interval, crawls for a
    // while, briefly outpaces the trail and then runs level with it.
    let rate = 26 * M / 10;
    let mut head = Vec::new();
    head.extend(std::iter::repeat_n(rate, 60));
    head.extend(std::iter::repeat_n(M / 5, 30));
    head.extend(std::iter::repeat_n(6 * M / 10, 510));
    head.extend(std::iter::repeat_n(34 * M / 10, 180));
    head.extend(std::iter::repeat_n(rate, 6000));
    let total: u64 = head.iter().sum();
    let scenario = Scenario {
        tick: Duration::from_millis(1),
        head: ScriptedReplica::new(head).with_length(total),
        trail: ScriptedReplica::new(vec![rate; 8000]).with_length(total),
    };
    let config = MonitorConfig::new(threshold).with_check_period(Duration::from_millis(30));
    let (mut source, h, t) = scenario.to_source();
    let report = match enforcement_loop(h, t, &mut source, &config) {
        Ok(r) => r,
        Err(e) => return Fail(e.to_string()),
    };
    let samples = &report.samples;
    let live: Vec<_> = samples.iter().take_while(|s| s.action != Action::HeadDone).collect();
    let suspends = live.iter().filter(|s| s.action == Action::Suspend).count();
    let last_control = live
        .iter()
        .rposition(|s| matches!(s.action, Action::Suspend | Action::Resume))
        .unwrap_or(0);
    let tail = &live[last_control + 1..];
    let quiet = tail.iter().all(|s| s.action == Action::None && s.staggering > threshold as i64);
    let dip = live.iter().map(|s| s.staggering).skip(2).min().unwrap_or(0);
    let plateau = tail.last().map_or(0, |s| s.staggering);
    let elapsed = start.elapsed();
    check(
        suspends >= 2 && tail.len() >= 100 && quiet && check_samples(samples).is_ok() && elapsed < Duration::from_secs(1),
        format!(
            "{suspends} suspensions, dip to {}M, then {} quiet checks at {}M (threshold 150M) in {elapsed:?}",
            dip / M as i64,
            tail.len(),
            plateau / M as i64
        ),
    )
}

fn c2_decisions() -> Outcome {
    let a = decide(84_000_000, 150_000_000, TrailState::Running);
    let b = decide(210_000_000, 150_000_000, TrailState::Suspended);
    check(
        a == Decision::Suspend && b == Decision::Resume,
        format!("84M running -> {a:?}, 210M suspended -> {b:?}"),
    )
}

fn c3_exhaustive() -> Outcome {
    let start = Instant::now();
    let safe = exhaustive_check(&[0, 1, 2], 6, 1, 1, 4);
    let tight = exhaustive_check(&[0, 1, 2], 6, 1, 1, 3);
    let elapsed = start.elapsed();
    match (safe, tight) {
        (Ok(SimVerdict::Safe { schedules }), Ok(SimVerdict::Counterexample { schedule, min_staggering })) => check(
            elapsed < Duration::from_secs(10),
            format!(
                "threshold 4 safe over {schedules} schedules; threshold 3 fails (head {:?}, trail {:?}, min {min_staggering}); {elapsed:?}",
                schedule.head_deltas, schedule.trail_deltas
            ),
        ),
        (s, t) => Fail(format!("threshold 4: {s:?}; threshold 3: {t:?}")),
    }
}

fn random_schedule(rng: &mut ChaCha8Rng) -> (Schedule, u64) {
    let ticks = rng.gen_range(1..=40);
    let mut deltas = || (0..ticks).map(|_| rng.gen_range(0..=5)).collect::<Vec<u64>>();
    let (h, t) = (deltas(), deltas());
    let mut s = Schedule::new(h, t, rng.gen_range(1..=4), rng.gen_range(0..=3)).unwrap();
    if rng.gen_bool(0.3) {
        let total: u64 = s.head_deltas.iter().sum();
        s.head_length = Some(total / 2 + 1);
        s.trail_length = Some(total / 2 + 1);
    }
    (s, rng.gen_range(0..=20))
}

fn c4_cross_validation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let tick = Duration::from_micros(10);
    for i in 0..100 {
        let (schedule, threshold) = random_schedule(&mut rng);
        let sim = simulate(&schedule, threshold).unwrap();
        let (mut source, h, t) = schedule.to_scenario(tick).to_source();
        let looped = enforcement_loop(h, t, &mut source, &schedule.monitor_config(threshold, tick)).unwrap();
        let a: Vec<_> = sim.samples.iter().map(|s| (s.staggering, s.action)).collect();
        let b: Vec<_> = looped.samples.iter().map(|s| (s.staggering, s.action)).collect();
        if a != b {
            return Fail(format!("schedule {i} ({schedule:?}, threshold {threshold}) diverges"));
        }
    }
    Pass("100/100 random schedules give identical sampled staggering and actions".into())
}

fn os_backend() -> Result<(CounterEvent, String), Outcome> {
    match common::os_event() {
        Some(CounterEvent::Instructions) => Ok((CounterEvent::Instructions, String::new())),
        Some(e) => Ok((e, format!(" [no PMU here: progress counted with {e}]"))),
        None => Err(Skip("no usable perf counter on this host".into())),
    }
}

fn c5_fault_detection() -> Outcome {
    let (event, note) = match os_backend() {
        Ok(x) => x,
        Err(o) => return o,
    };
    let w = WorkloadId::Checksum { bytes: 4096 };
    let payload = w.payload(11);
    let config = MonitorConfig::new(20_000)
        .with_check_period(Duration::from_micros(100))
        .with_timeout(Duration::from_secs(20));
    let mut detected = 0;
    let mut injections = 0;
    for role in [Role::Head, Role::Trail] {
        for fault in FaultSpec::all_bit_flips(role, &payload.output_sizes) {
            injections += 1;
            let options = ProtectOptions::new(Backend::Process(event)).with_fault(fault);
            match protect_payload(&w, &payload, &config, &options) {
                Ok(run) => {
                    if let (Verdict::Mismatch(locs), softdr::FaultKind::BitFlip { byte_offset, .. }) = (&run.verdict, &fault.kind) {
                        if locs.len() == 1 && locs[0].output_index == 0 && locs[0].byte_offset == *byte_offset {
                            detected += 1;
                        }
                    }
                }
                Err(e) => return Fail(format!("{fault}: {e}")),
            }
        }
    }
    let mut false_alarms = 0;
    for _ in 0..100 {
        match protect_payload(&w, &payload, &config, &ProtectOptions::new(Backend::Process(event))) {
            Ok(run) if run.verdict == Verdict::Match => {}
            Ok(_) => false_alarms += 1,
            Err(e) => return Fail(e.to_string()),
        }
    }
    check(
        detected == 256 && injections == 256 && false_alarms == 0,
        format!("{detected}/{injections} flips detected at the right byte, {false_alarms}/100 fault-free mismatches{note}"),
    )
}

fn c6_oracle_equivalence() -> Outcome {
    let (event, note) = match os_backend() {
        Ok(x) => x,
        Err(o) => return o,
    };
    let config = MonitorConfig::new(50_000)
        .with_check_period(Duration::from_micros(200))
        .with_timeout(Duration::from_secs(30));
    for n in [1, 4, 32] {
        let w = WorkloadId::Matmul { n };
        let payload = w.payload(n as u64);
        let direct = run_direct(&w, &payload).unwrap();
        match protect_payload(&w, &payload, &config, &ProtectOptions::new(Backend::Process(event))) {
            Ok(run) if run.verdict == Verdict::Match && run.outputs.as_ref() == Some(&direct) => {}
            Ok(run) => return Fail(format!("matmul:{n}: verdict {}", run.verdict)),
            Err(e) => return Fail(format!("matmul:{n}: {e}")),
        }
    }
    Pass(format!("matmul 1, 4 and 32 bitwise equal to direct execution{note}"))
}

fn c7_diversity_loss() -> Outcome {
    // Check every 4 ticks; the head stalls after 4 ticks while the freshly
    // resumed trail runs at 20 per tick and overtakes it before the next check.
    let scenario = Scenario {
        tick: Duration::from_micros(100),
        head: ScriptedReplica::new([vec![10; 4], vec![0; 20]].concat()).with_length(1000),
        trail: ScriptedReplica::new(vec![20; 10]),
    };
    let period = Duration::from_micros(400);
    let record = MonitorConfig::new(1)
        .with_check_period(period)
        .with_timeout(Duration::from_millis(10));
    let (mut source, h, t) = scenario.to_source();
    let report = enforcement_loop(h, t, &mut source, &record).unwrap();
    let loss = report
        .samples
        .iter()
        .find(|s| s.action == Action::DiversityLoss && s.staggering < 0)
        .copied();

    let comp = |_: &[&[u8]], out: &mut [&mut [u8]]| -> softdr::replication::WrapperResult {
        out[0][0] = 1;
        Ok(())
    };
    let abort = record.clone().with_policy(DiversityLossPolicy::AbortRun);
    let verdict = softdr::protect_payload(
        &comp,
        &softdr::PayloadSpec::new(vec![], vec![1]),
        &abort,
        &ProtectOptions::new(Backend::Scripted(scenario)),
    )
    .map(|r| r.verdict);
    match (loss, verdict) {
        (Some(s), Ok(Verdict::DiversityLoss(v))) if v.staggering < 0 => Pass(format!(
            "DIVERSITY_LOSS recorded at interval {} (staggering {}); AbortRun verdict at staggering {}",
            s.interval_index, s.staggering, v.staggering
        )),
        (loss, verdict) => Fail(format!("recorded {loss:?}, abort verdict {verdict:?}")),
    }
}

fn c8_calibration() -> Outcome {
    if !common::instructions_available() {
        return Skip(
            "no retired-instruction counter on this host (no PMU); the task-clock proxy counts nanoseconds, \
             so its rate says nothing about instructions"
                .into(),
        );
    }
    let options = CalibrationOptions {
        duration: Duration::from_millis(300),
        samples: 30,
        ..CalibrationOptions::default()
    };
    match calibrate(CounterEvent::Instructions, &options) {
        Ok(report) => {
            let t = recommend_threshold(report.peak_rate, Duration::from_millis(1), Duration::ZERO, 1.0);
            let in_band = (10_000..=100_000_000).contains(&t);
            Info(format!(
                "peak {:.2e} instr/s -> {t} instructions for 1 ms at margin 1 ({} the 10^5..10^7 band, one order of tolerance)",
                report.peak_rate,
                if in_band { "within" } else { "outside" }
            ))
        }
        Err(e) => Info(format!("calibration failed: {e}")),
    }
}

fn c9_suspension() -> Outcome {
    let (event, note) = match os_backend() {
        Ok(x) => x,
        Err(o) => return o,
    };
    let mut source = ProcessSource::new(event);
    let h = match source.spawn(Role::Trail, None, false, || {}, || -> i32 { spin_forever() }) {
        Ok(h) => h,
        Err(e) => return Fail(e.to_string()),
    };
    let pid = source.pid(h).unwrap();
    let mut drifted = 0;
    let mut progressed = 0;
    let result = (|| -> softdr::Result<()> {
        for _ in 0..100 {
            source.resume(h)?;
            let before = source.read_count(h)?;
            std::thread::sleep(Duration::from_micros(300));
            source.suspend(h)?;
            let deadline = Instant::now() + Duration::from_secs(1);
            while common::proc_state(pid) != Some('T') && Instant::now() < deadline {
                std::thread::yield_now();
            }
            let c1 = source.read_count(h)?;
            if c1 > before {
                progressed += 1;
            }
            std::thread::sleep(Duration::from_millis(1));
            let c2 = source.read_count(h)?;
            if c2 != c1 {
                drifted += 1;
            }
        }
        Ok(())
    })();
    source.release_all();
    if let Err(e) = result {
        return Fail(e.to_string());
    }
    check(
        drifted == 0 && progressed > 0,
        format!("{drifted}/100 probes drifted while stopped ({progressed} showed progress while running){note}"),
    )
}
