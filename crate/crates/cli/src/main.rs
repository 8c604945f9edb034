//! `dard`: corpus synthesis, pool generation, simulated fleet runs, baselines,
//! influence calibration, threshold sweeps and plot data.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "dard", version, about = "Decentralized collaborative POI recommendation with adaptive reference data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `sim.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write a synthetic check-in corpus.
    Synth,
    /// Build the reference pool and neighbor sets.
    Pool,
    /// Run the configured strategy end to end.
    Run,
    /// Run all four reference-selection strategies.
    Baselines,
    /// Compare influence estimates with leave-one-out retraining on a convex model.
    Oracle,
    /// Sweep the influence threshold (and keep fraction).
    Sweep,
    /// Turn a sweep into (alpha, HR@10) rows.
    Plotdata,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let Some(path) = &cli.config else {
        eprintln!("error: --config is required");
        return ExitCode::from(EXIT_CONFIG);
    };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let mut cfg = match ExperimentConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be positive");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    let out = &cli.out;
    let result = commands::ensure_dir(out).and_then(|_| match cli.command {
        Command::Synth => commands::synth(&cfg, out),
        Command::Pool => commands::pool(&cfg, out),
        Command::Run => commands::run(&cfg, out),
        Command::Baselines => commands::baselines(&cfg, out),
        Command::Oracle => commands::oracle(&cfg, out),
        Command::Sweep => commands::sweep(&cfg, out),
        Command::Plotdata => commands::plotdata(&cfg, out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
