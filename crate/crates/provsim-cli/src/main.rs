//! `provsim` — run provisioning simulations, sweep the architecture ×
//! scenario grid, or calibrate rate parameters against measured totals.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use provsim::calibrate::{calibrate, parse_targets, CandidateGrid};
use provsim::cloud::Warmup;
use provsim::config::{emit_config, parse_config, RunConfig};
use provsim::report::{render_csv, render_summary, render_trace_csv, write_text, CSV_HEADER};
use provsim::scenario::{run_experiment, sweep_grid, ScenarioKind};
use provsim::ArchitectureKind;

#[derive(Parser)]
#[command(
    name = "provsim",
    version,
    about = "Deterministic simulator of VM provisioning architectures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one architecture × scenario experiment and emit per-VM CSV.
    Simulate(SimulateArgs),
    /// Run the full 4×4 grid and print the summary matrix (minutes).
    Sweep(SweepArgs),
    /// Grid-search calibration parameters against target totals.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file; omitted means calibrated defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Independent runs to average (seeds seed, seed+1, …).
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// Base seed for the run sequence.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Lognormal sigma applied to contextualization stage durations.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Image-cache warm-up before t=0: "full" or "none".
    #[arg(long, default_value = "full")]
    warmup: String,
    /// Requests per scenario.
    #[arg(long, default_value_t = 10)]
    vms: usize,
    /// Arrival gap for the interval scenarios, in seconds.
    #[arg(long, default_value_t = 180.0)]
    interval: f64,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Deployment architecture: arch1, arch2, arch3 or arch4.
    #[arg(long, default_value = "arch1")]
    arch: String,
    /// Arrival pattern: sb, mb, si or mi.
    #[arg(long, default_value = "sb")]
    scenario: String,
    /// Write per-VM CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the full event trace CSV here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Also write the concatenated per-VM CSV of every cell here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// CSV of targets: arch,scenario,target_minutes.
    #[arg(long)]
    targets: PathBuf,
    /// Write the calibrated config as TOML here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Config mistakes exit 1; failures during simulation or output exit 2.
enum Failure {
    Config(String),
    Simulation(String),
}

impl Failure {
    fn report(self) -> ExitCode {
        match self {
            Failure::Config(msg) => {
                eprintln!("config error: {msg}");
                ExitCode::from(1)
            }
            Failure::Simulation(msg) => {
                eprintln!("simulation error: {msg}");
                ExitCode::from(2)
            }
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn sim_err(e: impl std::fmt::Display) -> Failure {
    Failure::Simulation(e.to_string())
}

fn read_to_string(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, Failure> {
    let contents = match &common.config {
        Some(path) => read_to_string(path)?,
        None => String::new(),
    };
    let mut config = parse_config(&contents).map_err(config_err)?;
    config.runs = common.runs;
    config.seed = common.seed;
    config.jitter_sigma = common.jitter;
    config.warmup = Warmup::from_str(&common.warmup).map_err(config_err)?;
    config.scenario.n_vms = common.vms;
    config.scenario.interval_s = common.interval;
    Ok(config)
}

fn emit(out: &Option<PathBuf>, contents: &str) -> Result<(), Failure> {
    match out {
        Some(path) => write_text(path, contents).map_err(sim_err),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn warn_about(outcome_warnings: &[String], label: &str) {
    for w in outcome_warnings {
        eprintln!("warning ({label}): {w}");
    }
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut config = load_config(&args.common)?;
    config.arch = ArchitectureKind::from_str(&args.arch).map_err(config_err)?;
    config.scenario.kind = ScenarioKind::from_str(&args.scenario).map_err(config_err)?;
    config.out_path = args.out.clone();
    config.trace_path = args.trace.clone();
    if args.common.dump_config {
        print!("{}", emit_config(&config));
        return Ok(());
    }
    let result = run_experiment(&config.setup(), &config.scenario, config.runs).map_err(sim_err)?;
    for run in &result.runs {
        warn_about(&run.outcome.audit_violations, "audit");
        warn_about(&run.outcome.image_warnings, "image");
    }
    emit(&config.out_path, &render_csv(&result))?;
    if let Some(trace_path) = &config.trace_path {
        write_text(trace_path, &render_trace_csv(&result)).map_err(sim_err)?;
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), Failure> {
    let config = load_config(&args.common)?;
    if args.common.dump_config {
        print!("{}", emit_config(&config));
        return Ok(());
    }
    let cells = sweep_grid(
        &config.setup(),
        config.scenario.n_vms,
        config.scenario.interval_s,
        config.runs,
    )
    .map_err(sim_err)?;
    print!("{}", render_summary(&cells));
    if let Some(out) = &args.out {
        let mut combined = String::from(CSV_HEADER);
        combined.push('\n');
        for cell in &cells {
            let csv = render_csv(&cell.result);
            combined.push_str(csv.split_once('\n').map(|(_, body)| body).unwrap_or(""));
        }
        write_text(out, &combined).map_err(sim_err)?;
    }
    Ok(())
}

fn run_calibrate(args: CalibrateArgs) -> Result<(), Failure> {
    let mut config = load_config(&args.common)?;
    let targets = parse_targets(&read_to_string(&args.targets)?).map_err(config_err)?;
    if args.common.dump_config {
        print!("{}", emit_config(&config));
        return Ok(());
    }
    let outcome = calibrate(
        &config.setup(),
        &targets,
        &CandidateGrid::default(),
        config.scenario.n_vms,
        config.scenario.interval_s,
        config.runs,
    )
    .map_err(sim_err)?;
    println!(
        "evaluated {} candidates, best score {:.6}",
        outcome.evaluated, outcome.score
    );
    println!("[calibration]");
    println!(
        "ssh_stream_rate_mib_s = {}",
        outcome.best.ssh_stream_rate_mib_s
    );
    println!(
        "frontend_transfer_rate_mib_s = {}",
        outcome.best.frontend_transfer_rate_mib_s
    );
    println!("register_s = {}", outcome.best.register_s);
    println!("colocation_factor = {}", outcome.best.colocation_factor);
    for (target, achieved) in targets.iter().zip(&outcome.achieved_minutes) {
        println!(
            "# {} {}: target {:.1} min, achieved {:.1} min",
            target.arch.label(),
            target.scenario.label(),
            target.target_minutes,
            achieved
        );
    }
    if let Some(out) = &args.out {
        config.calibration = outcome.best;
        write_text(out, &emit_config(&config)).map_err(sim_err)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Sweep(args) => sweep(args),
        Command::Calibrate(args) => run_calibrate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => failure.report(),
    }
}
