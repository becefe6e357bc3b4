mod commands;
mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use causal_kmeans::{Error, ErrorKind};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "causal-kmeans", version, about = "Cluster units by their counterfactual mean vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a codebook and write centers, assignments and a fit report.
    Fit(Common),
    /// Run the simulation study and write raw and summary tables.
    Simulate(Common),
    /// Elbow, boundary-mass and cluster-profile diagnostics.
    Diagnose(Common),
    /// Write one simulated sample as an input CSV.
    Generate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set simulation.reps=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the simulation study.
    #[arg(long)]
    workers: Option<usize>,
    /// Also write SVG charts.
    #[arg(long)]
    plots: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, Error> {
    let (common, simulation_default) = match &cli.command {
        Command::Fit(c) | Command::Diagnose(c) => (c, false),
        Command::Simulate(c) | Command::Generate(c) => (c, true),
    };
    let cfg = config::load(common.config.as_deref(), &common.sets, simulation_default)?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    std::fs::create_dir_all(&out)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", out.display())))?;
    let out: &Path = &out;
    match &cli.command {
        Command::Fit(_) => commands::fit(&cfg, out),
        Command::Simulate(c) => {
            let workers = match c.workers {
                Some(0) => return Err(Error::Config("--workers must be positive".into())),
                Some(w) => w,
                None => std::thread::available_parallelism().map_or(1, |n| n.get()),
            };
            commands::simulate(&cfg, out, workers, c.plots || cfg.plots)
        }
        Command::Diagnose(_) => commands::diagnose(&cfg, out),
        Command::Generate(_) => commands::generate(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(written)) => {
            for p in written {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(4)
        }
    }
}
