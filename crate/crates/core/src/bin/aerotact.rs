use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aerotact::harness::{self, RunError, ScenarioConfig};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "aerotact", version, about = "Tactile grasping quadrotor simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory for logs and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write tick and force logs plus metrics.
    Run { config: PathBuf },
    /// Run a scenario with and without its ablation axis.
    Ablate { config: PathBuf },
    /// No-load roll/pitch sweep of every tactile sensor.
    Sweep { config: PathBuf },
    /// Fit per-sensor calibrations from synthetic loading data.
    Calibrate { config: PathBuf },
    /// Decode a recorded bus stream to CSV.
    Replay { stream: PathBuf },
    /// Check a config and print its canonical form.
    Validate { config: PathBuf },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, ExitCode> {
    match ScenarioConfig::load(path) {
        Ok(mut cfg) => {
            if let Some(s) = seed {
                cfg.seed = s;
            }
            Ok(cfg)
        }
        Err(e) => {
            eprintln!("{}: invalid configuration", path.display());
            for fe in &e.errors {
                eprintln!("  {fe}");
            }
            Err(ExitCode::from(EXIT_VALIDATION))
        }
    }
}

fn fail(e: &RunError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
}

fn io_fail(e: std::io::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_RUNTIME)
}

fn execute(cli: Cli) -> Result<(), ExitCode> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(config, cli.seed)?;
            let outcome = harness::run_scenario(&cfg).map_err(|e| fail(&e))?;
            harness::write_run(out, &outcome).map_err(io_fail)?;
            print!("{}", outcome.metrics.to_kv());
            if let Some(e) = &outcome.error {
                return Err(fail(e));
            }
        }
        Command::Ablate { config } => {
            let cfg = load(config, cli.seed)?;
            let pair = harness::run_ablation_pair(&cfg).map_err(|e| fail(&e))?;
            pair.write(out).map_err(io_fail)?;
            print!("{}", pair.comparison());
            if let Some(e) = pair.error() {
                return Err(fail(e));
            }
        }
        Command::Sweep { config } => {
            let cfg = load(config, cli.seed)?;
            let sweep = harness::run_sweep(&cfg).map_err(|e| fail(&e))?;
            sweep.write(out).map_err(io_fail)?;
            print!("{}", sweep.metrics_kv());
        }
        Command::Calibrate { config } => {
            let cfg = load(config, cli.seed)?;
            let cal = harness::run_calibration(&cfg).map_err(|e| fail(&e))?;
            cal.write(out).map_err(io_fail)?;
            print!("{}", cal.report());
        }
        Command::Replay { stream } => {
            let replay = harness::replay_stream(stream).map_err(io_fail)?;
            std::fs::create_dir_all(out).map_err(io_fail)?;
            std::fs::write(out.join("replay.csv"), &replay.csv).map_err(io_fail)?;
            println!("frames = {}\nframing_errors = {}", replay.frames, replay.errors);
        }
        Command::Validate { config } => {
            let cfg = load(config, cli.seed)?;
            print!("{}", cfg.to_canonical_string());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
