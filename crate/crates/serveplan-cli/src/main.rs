//! Command-line front end: solve configurations, replay traces through the
//! simulator, quantify interference gaps, and size profiling grids.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use thiserror::Error;

use serveplan::allocator::Topology;
use serveplan::interference::{
    gap_report, DownclockModel, InterferenceModel, MemoryLatencyCurve,
};
use serveplan::optimizer::{solve, OptimizeError, SolveOptions};
use serveplan::profile::grid_size;
use serveplan::sim::{run_trace, ArrivalTrace, SimOptions, TraceSpec};
use serveplan::{Configuration, Profile};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Infeasible(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
            CliError::Infeasible(_) => 4,
        }
    }
}

fn input(err: impl std::fmt::Display) -> CliError {
    CliError::Input(err.to_string())
}

#[derive(Parser)]
#[command(
    name = "serveplan",
    version,
    about = "Plan and rehearse latency-minimizing multi-instance serving configurations"
)]
struct Cli {
    /// key=value defaults file; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Solve the latency-minimizing instance mix for a thread budget and batch size.
    Optimize(OptimizeArgs),
    /// Replay an arrival trace through the serving-loop simulator.
    Simulate(SimulateArgs),
    /// Compare expected latency against concurrent execution under interference models.
    Gap(GapArgs),
    /// Show profiling grid sizes for a thread budget and batch exponent.
    Grid(GridArgs),
}

#[derive(Args)]
struct OptimizeArgs {
    /// Profile CSV (threads,batch,latency_ms).
    #[arg(short = 'p', long)]
    profile: PathBuf,
    /// Total thread budget T.
    #[arg(short = 'T', long)]
    threads: u32,
    /// Target batch size B.
    #[arg(short = 'B', long)]
    batch: u32,
    /// Require the thread sum to equal T exactly (no idle threads).
    #[arg(long)]
    strict_threads: bool,
    /// Write output here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum InterferenceKind {
    None,
    Downclock,
    Memory,
    Both,
}

#[derive(Args)]
struct InterferenceArgs {
    /// Interference model applied to concurrent instances.
    #[arg(long, value_enum, default_value_t = InterferenceKind::None)]
    interference: InterferenceKind,
    /// Replacement for the default memory curve: CSV bandwidth_gbps,latency_multiplier.
    #[arg(long, value_name = "FILE")]
    curve: Option<PathBuf>,
    /// Memory bandwidth one instance generates, GB/s.
    #[arg(long)]
    bandwidth_per_instance: Option<f64>,
    /// Nominal core frequency, GHz.
    #[arg(long)]
    base_freq_ghz: Option<f64>,
    /// Sustained all-core SIMD frequency, GHz.
    #[arg(long)]
    loaded_freq_ghz: Option<f64>,
    /// Busy-core fraction at which downclocking engages.
    #[arg(long)]
    simd_threshold: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Profile CSV (threads,batch,latency_ms).
    #[arg(short = 'p', long)]
    profile: PathBuf,
    /// Arrival trace CSV (timestamp_ms); omit to use the generator flags.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    /// Generator: arrival rate, requests per second.
    #[arg(long)]
    rate: Option<f64>,
    /// Generator: trace duration in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Generator: moment the rate steps, seconds.
    #[arg(long)]
    step_at: Option<f64>,
    /// Generator: rate after the step, requests per second.
    #[arg(long)]
    step_rate: Option<f64>,
    /// Generator: relative inter-arrival jitter in [0, 1).
    #[arg(long)]
    jitter: Option<f64>,
    /// Seed for all generated randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Machine shape as SxC (e.g. 2x8).
    #[arg(long, value_name = "SxC")]
    topology: Option<String>,
    /// Machine shape as a file: one socket per line, core ids like 0-7,16.
    #[arg(long, value_name = "FILE")]
    topology_file: Option<PathBuf>,
    /// Batch size the deployment starts with.
    #[arg(long)]
    initial_batch: Option<u32>,
    /// Batch aggregation timeout, ms.
    #[arg(long)]
    batch_timeout_ms: Option<f64>,
    /// Worker startup delay, ms.
    #[arg(long)]
    startup_delay_ms: Option<f64>,
    /// Old-set teardown time after a switch, ms.
    #[arg(long)]
    teardown_delay_ms: Option<f64>,
    /// Latency factor while both instance sets are resident.
    #[arg(long)]
    dual_active_penalty: Option<f64>,
    /// Per-batch pre-processing overhead, ms.
    #[arg(long)]
    pre_ms: Option<f64>,
    /// Per-batch post-processing overhead, ms.
    #[arg(long)]
    post_ms: Option<f64>,
    /// EWMA weight on the newest queue-depth sample.
    #[arg(long)]
    alpha: Option<f64>,
    /// Mode window over recent batch estimates.
    #[arg(long)]
    mode_window: Option<usize>,
    /// Minimum interval between reconfiguration decisions, ms.
    #[arg(long)]
    reconfig_timeout_ms: Option<f64>,
    /// Timeout-fired dispatch fraction that signals batch-size pressure.
    #[arg(long)]
    timeout_trigger_fraction: Option<f64>,
    /// Keep serving with the initial configuration; decisions are logged
    /// but never acted on.
    #[arg(long)]
    no_reconfig: bool,
    /// Require exact thread sums in solved configurations.
    #[arg(long)]
    strict_threads: bool,
    #[command(flatten)]
    interference: InterferenceArgs,
    /// Write the JSON summary here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Write the per-batch CSV timeline here.
    #[arg(long, value_name = "FILE")]
    timeline: Option<PathBuf>,
}

#[derive(Args)]
struct GapArgs {
    /// Profile CSV (threads,batch,latency_ms).
    #[arg(short = 'p', long)]
    profile: PathBuf,
    /// Total thread budget T.
    #[arg(short = 'T', long)]
    threads: u32,
    /// Target batch size B.
    #[arg(short = 'B', long)]
    batch: u32,
    /// Require exact thread sums in the solved configuration.
    #[arg(long)]
    strict_threads: bool,
    #[command(flatten)]
    interference: InterferenceArgs,
    /// Write output here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Total thread budget T.
    #[arg(short = 'T', long)]
    threads: u32,
    /// Largest profiled batch is 2^n.
    #[arg(short = 'n', long)]
    batch_exponent: u32,
    /// Write output here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// key=value defaults loaded from `--config`; keys use the long flag names.
struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    fn load(path: Option<&PathBuf>) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| input(format!("config {}: {e}", path.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') || line.starts_with('[') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    input(format!(
                        "config {} line {}: expected key=value",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                values.insert(
                    key.trim().replace('_', "-").to_ascii_lowercase(),
                    value.trim().to_owned(),
                );
            }
        }
        Ok(Self { values })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {raw:?}"))),
        }
    }
}

/// Flag value, else config-file value, else the built-in default.
fn resolve<T: FromStr>(
    flag: Option<T>,
    cfg: &ConfigFile,
    key: &str,
    default: T,
) -> Result<T, CliError> {
    match flag {
        Some(value) => Ok(value),
        None => Ok(cfg.get(key)?.unwrap_or(default)),
    }
}

fn emit(out: Option<&PathBuf>, content: &str) -> Result<(), CliError> {
    match out {
        None => {
            print!("{content}");
            Ok(())
        }
        Some(path) => fs::write(path, content)
            .map_err(|e| input(format!("write {}: {e}", path.display()))),
    }
}

fn load_profile(path: &PathBuf) -> Result<Profile, CliError> {
    Profile::load(path).map_err(|e| input(format!("profile {}: {e}", path.display())))
}

fn configuration_json(config: &Configuration) -> String {
    let mut text = serde_json::to_string_pretty(config).expect("configuration serializes");
    text.push('\n');
    text
}

fn build_interference(
    args: &InterferenceArgs,
    cfg: &ConfigFile,
) -> Result<(InterferenceModel<f64>, f64), CliError> {
    let bandwidth = resolve(
        args.bandwidth_per_instance,
        cfg,
        "bandwidth-per-instance",
        3.0,
    )?;
    let base = resolve(args.base_freq_ghz, cfg, "base-freq-ghz", 2.6)?;
    let loaded = resolve(args.loaded_freq_ghz, cfg, "loaded-freq-ghz", 2.2)?;
    let threshold = resolve(args.simd_threshold, cfg, "simd-threshold", 0.5)?;

    let downclock = || DownclockModel::new(base, loaded, threshold).map_err(input);
    let curve = || -> Result<MemoryLatencyCurve<f64>, CliError> {
        match &args.curve {
            None => Ok(MemoryLatencyCurve::default()),
            Some(path) => {
                let file = fs::File::open(path)
                    .map_err(|e| input(format!("curve {}: {e}", path.display())))?;
                MemoryLatencyCurve::from_csv_reader(file).map_err(input)
            }
        }
    };

    let model = match args.interference {
        InterferenceKind::None => InterferenceModel::None,
        InterferenceKind::Downclock => InterferenceModel::Downclock(downclock()?),
        InterferenceKind::Memory => InterferenceModel::Memory(curve()?),
        InterferenceKind::Both => InterferenceModel::Both(downclock()?, curve()?),
    };
    Ok((model, bandwidth))
}

fn solve_or_exit(
    profile: &Profile,
    threads: u32,
    batch: u32,
    strict: bool,
) -> Result<Configuration, CliError> {
    let options = SolveOptions {
        strict_threads: strict,
    };
    solve(profile, threads, batch, options).map_err(|e| match e {
        OptimizeError::Infeasible { .. } => CliError::Infeasible(e.to_string()),
        other => input(other),
    })
}

fn cmd_optimize(args: &OptimizeArgs) -> Result<(), CliError> {
    let profile = load_profile(&args.profile)?;
    let config = solve_or_exit(&profile, args.threads, args.batch, args.strict_threads)?;
    emit(args.out.as_ref(), &configuration_json(&config))
}

fn cmd_gap(args: &GapArgs, cfg: &ConfigFile) -> Result<(), CliError> {
    let profile = load_profile(&args.profile)?;
    let config = solve_or_exit(&profile, args.threads, args.batch, args.strict_threads)?;
    let (model, bandwidth) = build_interference(&args.interference, cfg)?;
    let report = gap_report(&profile, &config, &model, bandwidth).map_err(input)?;
    let payload = json!({
        "model": profile.model_id(),
        "T": args.threads,
        "B": args.batch,
        "interference": format!("{:?}", args.interference.interference).to_ascii_lowercase(),
        "per_instance_bandwidth_gbps": bandwidth,
        "config": config,
        "expected_ms": report.expected_ms,
        "adjusted_ms": report.adjusted_ms,
        "gap_fraction": report.gap_fraction,
    });
    let mut text = serde_json::to_string_pretty(&payload).expect("gap report serializes");
    text.push('\n');
    emit(args.out.as_ref(), &text)
}

fn cmd_grid(args: &GridArgs) -> Result<(), CliError> {
    let profiled = grid_size(args.threads, args.batch_exponent);
    let exhaustive = (1u64 << args.batch_exponent) * args.threads as u64;
    let payload = json!({
        "max_threads": args.threads,
        "batch_exponent": args.batch_exponent,
        "profiled_configs": profiled,
        "exhaustive_configs": exhaustive,
    });
    let mut text = serde_json::to_string_pretty(&payload).expect("grid report serializes");
    text.push('\n');
    emit(args.out.as_ref(), &text)
}

fn cmd_simulate(args: &SimulateArgs, cfg: &ConfigFile) -> Result<(), CliError> {
    let profile = load_profile(&args.profile)?;

    let topology = match (&args.topology, &args.topology_file) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "pass either --topology or --topology-file, not both".to_owned(),
            ))
        }
        (Some(spec), None) => Topology::parse(spec).map_err(input)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| input(format!("topology {}: {e}", path.display())))?;
            Topology::from_cpulists(&text).map_err(input)?
        }
        (None, None) => {
            let spec: String = resolve(None, cfg, "topology", "1x16".to_owned())?;
            Topology::parse(&spec).map_err(input)?
        }
    };

    let seed = resolve(args.seed, cfg, "seed", 1)?;
    let trace = match &args.trace {
        Some(path) => {
            ArrivalTrace::load(path).map_err(|e| input(format!("trace {}: {e}", path.display())))?
        }
        None => {
            let rate = args
                .rate
                .map(Ok)
                .unwrap_or_else(|| {
                    cfg.get::<f64>("rate")?.ok_or_else(|| {
                        CliError::Usage("simulate needs --trace or --rate/--duration".to_owned())
                    })
                })?;
            let duration = args
                .duration
                .map(Ok)
                .unwrap_or_else(|| {
                    cfg.get::<f64>("duration")?.ok_or_else(|| {
                        CliError::Usage("simulate needs --trace or --rate/--duration".to_owned())
                    })
                })?;
            let spec = TraceSpec {
                rate_per_s: rate,
                duration_s: duration,
                step_at_s: args.step_at,
                step_rate_per_s: args.step_rate,
                jitter: resolve(args.jitter, cfg, "jitter", 0.0)?,
                seed,
            };
            spec.generate().map_err(input)?
        }
    };

    let (interference, bandwidth) = build_interference(&args.interference, cfg)?;
    let defaults = SimOptions::default();
    let options = SimOptions {
        initial_batch: resolve(args.initial_batch, cfg, "initial-batch", defaults.initial_batch)?,
        batch_timeout_ms: resolve(
            args.batch_timeout_ms,
            cfg,
            "batch-timeout-ms",
            defaults.batch_timeout_ms,
        )?,
        startup_delay_ms: resolve(
            args.startup_delay_ms,
            cfg,
            "startup-delay-ms",
            defaults.startup_delay_ms,
        )?,
        teardown_delay_ms: resolve(
            args.teardown_delay_ms,
            cfg,
            "teardown-delay-ms",
            defaults.teardown_delay_ms,
        )?,
        dual_active_penalty: resolve(
            args.dual_active_penalty,
            cfg,
            "dual-active-penalty",
            defaults.dual_active_penalty,
        )?,
        pre_ms: resolve(args.pre_ms, cfg, "pre-ms", defaults.pre_ms)?,
        post_ms: resolve(args.post_ms, cfg, "post-ms", defaults.post_ms)?,
        alpha: resolve(args.alpha, cfg, "alpha", defaults.alpha)?,
        mode_window: resolve(args.mode_window, cfg, "mode-window", defaults.mode_window)?,
        reconfig_timeout_ms: resolve(
            args.reconfig_timeout_ms,
            cfg,
            "reconfig-timeout-ms",
            defaults.reconfig_timeout_ms,
        )?,
        timeout_trigger_fraction: resolve(
            args.timeout_trigger_fraction,
            cfg,
            "timeout-trigger-fraction",
            defaults.timeout_trigger_fraction,
        )?,
        reconfigure: !(args.no_reconfig
            || cfg.get::<bool>("no-reconfig")?.unwrap_or(false)),
        strict_threads: args.strict_threads
            || cfg.get::<bool>("strict-threads")?.unwrap_or(false),
        interference,
        per_instance_bandwidth_gbps: bandwidth,
    };

    let report = run_trace(&trace, &profile, &topology, &options).map_err(|e| match e {
        serveplan::sim::SimError::Setup(OptimizeError::Infeasible { .. }) => {
            CliError::Infeasible(e.to_string())
        }
        other => input(other),
    })?;

    if let Some(path) = &args.timeline {
        fs::write(path, report.timeline_csv())
            .map_err(|e| input(format!("timeline {}: {e}", path.display())))?;
    }
    let mut summary = report.summary_json();
    summary.push('\n');
    emit(args.out.as_ref(), &summary)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = ConfigFile::load(cli.config.as_ref())?;
    match &cli.command {
        Command::Optimize(args) => cmd_optimize(args),
        Command::Simulate(args) => cmd_simulate(args, &cfg),
        Command::Gap(args) => cmd_gap(args, &cfg),
        Command::Grid(args) => cmd_grid(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.code())
        }
    }
}
