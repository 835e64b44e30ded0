use std::fs;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::info;

use softdr::calibration::{calibrate, calibrate_scripted, CalibrationOptions, CalibrationReport, DEFAULT_SAFETY_MARGIN};
use softdr::progress::{CounterEvent, Scenario};
use softdr::sim::{exhaustive_check, Verdict as SimVerdict};
use softdr::workloads::WorkloadId;
use softdr::{
    protect_payload, write_trace, Action, Backend, DiversityLossPolicy, Error, FaultSpec, MonitorConfig,
    ProtectOptions, Verdict,
};

mod exit {
    pub const MISMATCH: u8 = 2;
    pub const REPLICA_FAILURE: u8 = 3;
    pub const TIMEOUT: u8 = 4;
    pub const DIVERSITY_LOSS: u8 = 5;
    pub const COUNTEREXAMPLE: u8 = 1;
    pub const USAGE: u8 = 64;
    pub const DATA: u8 = 65;
    pub const NO_INPUT: u8 = 66;
    pub const UNAVAILABLE: u8 = 69;
    pub const SOFTWARE: u8 = 70;
    pub const IO: u8 = 74;
}

#[derive(Debug, Parser)]
#[command(name = "softdr", version, about = "Run computations with software-enforced diverse redundancy")]
struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a demo workload under the monitor and report the verdict.
    Run(RunArgs),
    /// Measure peak instruction rate and suspend latency, recommend a threshold.
    Calibrate(CalibrateArgs),
    /// Exhaustively check the protocol model over small rate schedules.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// matmul:<n>, checksum:<bytes> or spin:<iterations>.
    #[arg(long, default_value = "matmul:200")]
    workload: WorkloadId,

    /// Minimum staggering in instructions.
    #[arg(long)]
    threshold: Option<u64>,

    /// Check period in microseconds [default: 1000, or the calibration file's].
    #[arg(long)]
    period_us: Option<u64>,

    /// Take threshold (and period, unless given) from a calibration report.
    #[arg(long, value_name = "FILE")]
    calibration_file: Option<PathBuf>,

    /// Write the staggering trace as CSV.
    #[arg(long, value_name = "FILE")]
    trace_out: Option<PathBuf>,

    /// Fault to inject, e.g. bitflip:trail:0:0:3, freeze:head:3ms, crash:head.
    #[arg(long, value_name = "FAULT")]
    inject: Vec<FaultSpec>,

    #[command(flatten)]
    backend: BackendArg,

    /// Cores for head, trail and monitor.
    #[arg(long, value_name = "H,T,M", value_parser = parse_cores)]
    cores: Option<(usize, usize, usize)>,

    #[arg(long)]
    timeout_ms: Option<u64>,

    /// Seed for the workload's input data.
    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Stop at the first negative staggering instead of recording it.
    #[arg(long)]
    abort_on_diversity_loss: bool,
}

#[derive(Debug, Args)]
struct BackendArg {
    /// os, os:<event> (instructions or task-clock), or scripted:<scenario.csv>.
    #[arg(long, default_value = "os")]
    backend: String,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Time spent measuring the peak instruction rate.
    #[arg(long, default_value_t = 500)]
    duration_ms: u64,

    /// Suspend cycles for the latency estimate (at least 30).
    #[arg(long, default_value_t = 100)]
    samples: u32,

    #[arg(long, default_value_t = DEFAULT_SAFETY_MARGIN)]
    margin: f64,

    /// Check period the threshold is for.
    #[arg(long, default_value_t = 1000)]
    period_us: u64,

    /// Polling step while waiting for a suspended count to freeze
    /// [default: 50, or one tick on the scripted backend].
    #[arg(long)]
    step_us: Option<u64>,

    /// Write the report here as key=value lines.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    #[command(flatten)]
    backend: BackendArg,

    /// Cores for head, trail and monitor; the measurement runs on the trail core.
    #[arg(long, value_name = "H,T,M", value_parser = parse_cores)]
    cores: Option<(usize, usize, usize)>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Per-tick rates both replicas may take, e.g. 0,1,2.
    #[arg(long, value_delimiter = ',', required = true)]
    alphabet: Vec<u64>,

    #[arg(long, default_value_t = 6)]
    ticks: usize,

    /// Check period in ticks.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    period: u64,

    /// Suspend latency in ticks.
    #[arg(long, default_value_t = 0)]
    latency: u64,

    #[arg(long)]
    threshold: u64,

    /// Also write a counterexample, if found, to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: exit::USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_) | Error::InvalidCoordinates(_) => exit::USAGE,
            Error::InvalidPayload(_) | Error::Parse { .. } | Error::SearchSpaceTooLarge { .. } | Error::InvalidSchedule(_) => {
                exit::DATA
            }
            Error::CounterUnavailable { .. } => exit::UNAVAILABLE,
            Error::Io(io) if io.kind() == io::ErrorKind::NotFound => exit::NO_INPUT,
            Error::Io(_) => exit::IO,
            _ => exit::SOFTWARE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    let code = if e.kind() == io::ErrorKind::NotFound {
        exit::NO_INPUT
    } else {
        exit::IO
    };
    Failure {
        code,
        message: format!("{}: {e}", path.display()),
    }
}

fn parse_cores(s: &str) -> Result<(usize, usize, usize), String> {
    let cores: Vec<usize> = s
        .split(',')
        .map(|c| c.trim().parse().map_err(|e| format!("bad core {c:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match cores[..] {
        [h, t, m] => Ok((h, t, m)),
        _ => Err(format!("expected three cores h,t,m, got {}", cores.len())),
    }
}

enum BackendChoice {
    Os(CounterEvent),
    Scripted(Scenario),
}

impl BackendArg {
    fn resolve(&self) -> Result<BackendChoice, Failure> {
        let spec = self.backend.as_str();
        if spec == "os" {
            return Ok(BackendChoice::Os(CounterEvent::default()));
        }
        if let Some(event) = spec.strip_prefix("os:") {
            return event.parse().map(BackendChoice::Os).map_err(Failure::usage);
        }
        if let Some(path) = spec.strip_prefix("scripted:") {
            let path = Path::new(path);
            let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            let scenario = Scenario::parse(&text).map_err(|e| Failure {
                code: exit::DATA,
                message: format!("{}: {e}", path.display()),
            })?;
            return Ok(BackendChoice::Scripted(scenario));
        }
        Err(Failure::usage(format!(
            "unknown backend {spec:?} (expected os, os:<event> or scripted:<file>)"
        )))
    }
}

fn verdict_code(verdict: &Verdict) -> u8 {
    match verdict {
        Verdict::Match => 0,
        Verdict::Mismatch(_) => exit::MISMATCH,
        Verdict::ReplicaFailure { .. } => exit::REPLICA_FAILURE,
        Verdict::Timeout => exit::TIMEOUT,
        Verdict::DiversityLoss(_) => exit::DIVERSITY_LOSS,
    }
}

fn cmd_run(args: RunArgs) -> Result<u8, Failure> {
    let report = match &args.calibration_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            Some(CalibrationReport::parse(&text).map_err(|e| Failure {
                code: exit::DATA,
                message: format!("{}: {e}", path.display()),
            })?)
        }
        None => None,
    };
    let threshold = args
        .threshold
        .or(report.as_ref().map(|r| r.recommended_threshold))
        .ok_or_else(|| Failure::usage("a threshold is required: pass --threshold or --calibration-file"))?;
    let period = match (args.period_us, &report) {
        (Some(us), _) => Duration::from_micros(us),
        (None, Some(r)) => r.check_period,
        (None, None) => Duration::from_millis(1),
    };

    let mut config = MonitorConfig::new(threshold).with_check_period(period);
    if args.abort_on_diversity_loss {
        config = config.with_policy(DiversityLossPolicy::AbortRun);
    }
    if let Some(ms) = args.timeout_ms {
        config = config.with_timeout(Duration::from_millis(ms));
    }
    if let Some((h, t, m)) = args.cores {
        config = config.with_cores(h, t, m);
    }
    let backend = match args.backend.resolve()? {
        BackendChoice::Os(event) => Backend::Process(event),
        BackendChoice::Scripted(scenario) => Backend::Scripted(scenario),
    };
    let mut options = ProtectOptions::new(backend);
    options.faults = args.inject;

    let payload = args.workload.payload(args.seed);
    info!("running {} with threshold {threshold}, period {period:?}", args.workload);
    let run = protect_payload(&args.workload, &payload, &config, &options)?;

    if let Some(path) = &args.trace_out {
        let file = fs::File::create(path).map_err(|e| io_failure(path, e))?;
        write_trace(&run.trace, BufWriter::new(file))?;
    }
    let trace = &run.trace;
    let min = trace.min_live_staggering();
    println!("verdict: {}", run.verdict);
    println!(
        "checks: {}  suspends: {}  resumes: {}  diversity losses: {}  min staggering before head exit: {}",
        trace.samples.len(),
        trace.count(Action::Suspend),
        trace.count(Action::Resume),
        trace.count(Action::DiversityLoss),
        min.map_or_else(|| "-".to_string(), |m| m.to_string()),
    );
    Ok(verdict_code(&run.verdict))
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<u8, Failure> {
    if args.margin.is_nan() || args.margin < 1.0 {
        return Err(Failure::usage("margin must be ≥ 1"));
    }
    if args.samples < 30 {
        return Err(Failure::usage("--samples must be at least 30"));
    }
    if args.period_us == 0 {
        return Err(Failure::usage("--period-us must be positive"));
    }
    let mut options = CalibrationOptions {
        duration: Duration::from_millis(args.duration_ms),
        samples: args.samples,
        check_period: Duration::from_micros(args.period_us),
        safety_margin: args.margin,
        core: args.cores.map(|(_, t, _)| t),
        ..CalibrationOptions::default()
    };
    let report = match args.backend.resolve()? {
        BackendChoice::Os(event) => {
            if let Some(us) = args.step_us {
                options.step = Duration::from_micros(us);
            }
            if options.duration < Duration::from_millis(100) {
                return Err(Failure::usage("--duration-ms must be at least 100"));
            }
            calibrate(event, &options)?
        }
        BackendChoice::Scripted(scenario) => {
            options.step = args.step_us.map_or(scenario.tick, Duration::from_micros);
            options.window = options.window.max(scenario.tick);
            calibrate_scripted(&scenario, &options)?
        }
    };
    let text = report.to_key_values();
    print!("{text}");
    if let Some(path) = &args.out {
        fs::write(path, &text).map_err(|e| io_failure(path, e))?;
    }
    eprintln!("recommended threshold: {} instructions", report.recommended_threshold);
    Ok(0)
}

fn cmd_simulate(args: SimulateArgs) -> Result<u8, Failure> {
    let verdict = exhaustive_check(&args.alphabet, args.ticks, args.period, args.latency, args.threshold)?;
    match verdict {
        SimVerdict::Safe { schedules } => {
            println!("safe: no negative staggering in {schedules} schedules");
            Ok(0)
        }
        SimVerdict::Counterexample {
            schedule,
            min_staggering,
        } => {
            eprintln!("counterexample: staggering reaches {min_staggering}");
            let csv = schedule.to_csv();
            print!("{csv}");
            if let Some(path) = &args.out {
                fs::write(path, &csv).map_err(|e| io_failure(path, e))?;
            }
            Ok(exit::COUNTEREXAMPLE)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
