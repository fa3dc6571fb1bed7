use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use phytosense::config::{load_experiment, load_scenario};
use phytosense::runtime::{replay_log, run_experiment, run_sweep_command, simulate};

/// Plant biosensing and phytoactuation workbench.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an autonomous experiment and log every cycle.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Pace cycles in real time instead of virtual time.
        #[arg(long)]
        wall_clock: bool,
        /// Override the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measure the impedance spectrum described by the [sweep] section.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Feed a recorded log through the configured detectors and bindings.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Playback speed relative to recording; default is as fast as possible.
        #[arg(long, default_value_t = f64::INFINITY)]
        speed: f64,
    },
    /// Run a scenario open-loop and write the simulated channels as CSV.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, wall_clock, seed } => {
            let mut cfg = load_experiment(&config)?;
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            let summary = run_experiment(cfg, wall_clock)?;
            print!("{summary}");
        }
        Command::Sweep { config, out } => {
            let cfg = load_experiment(&config)?;
            let points = run_sweep_command(&cfg, &out)?;
            println!("{} points written to {}", points.len(), out.display());
        }
        Command::Replay { log, config, speed } => {
            let cfg = load_experiment(&config)?;
            let r = replay_log(&cfg, &log, speed)?;
            print!("{}", r.summary);
        }
        Command::Simulate { scenario, out } => {
            let cfg = load_scenario(&scenario)?;
            let s = simulate(cfg, &out)?;
            println!("{} records written to {}", s.cycles, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // inner errors are already folded into the top-level message
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
