use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use derm_lab::config::{Experiment, ExperimentConfig};
use derm_lab::error::CliError;
use derm_lab::plots::emit_plot_data;
use derm_lab::run::execute;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Worker threads for simulation and evaluation; defaults to all cores.
const WORKERS_ENV: &str = "DERM_WORKERS";

#[derive(Parser)]
#[command(name = "derm-lab", version, about = "Run stopping, hedging and utility experiments from JSON configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a one-dimensional put exercise boundary and compare with finite differences.
    PutBoundary(RunArgs),
    /// Train max-call exercise boundaries, one set of runs per initial price.
    Maxcall(RunArgs),
    /// Learn Heston quadratic-hedging prices and policies.
    HestonHedge(RunArgs),
    /// Overlearning study for the two-period exponential-utility investor.
    Merton(RunArgs),
    /// Reference prices from the non-neural solvers.
    Oracle(RunArgs),
    /// Convert a finished run directory into plot-ready CSV bundles.
    EmitPlots {
        /// The run directory to read.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the root seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Use the large published budgets where the experiment defines them.
    #[arg(long)]
    paper_scale: bool,
    /// Output directory; overrides `output_dir` of the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn configure_workers() -> Result<(), CliError> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("{WORKERS_ENV}: {e}")))?;
    }
    Ok(())
}

fn run_experiment(expected: Experiment, args: &RunArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut config = ExperimentConfig::parse(&text)?;
    if config.experiment != expected {
        return Err(CliError::Config(format!(
            "config is for `{}`, not `{}`",
            config.experiment.name(),
            expected.name()
        )));
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.paper_scale && !matches!(expected, Experiment::Maxcall | Experiment::HestonHedge) {
        log::warn!("{} has no paper-scale preset; running the configured budget", expected.name());
    }
    let plan = config.plan(args.paper_scale)?;
    let out = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(expected.name()));
    let manifest = execute(&config, &plan, args.paper_scale, &out)?;
    println!(
        "wrote {} files to {} (config {})",
        manifest.outputs.len() + 1,
        out.display(),
        &manifest.config_hash[..12]
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_workers().and_then(|_| match &cli.command {
        Command::PutBoundary(a) => run_experiment(Experiment::PutBoundary, a),
        Command::Maxcall(a) => run_experiment(Experiment::Maxcall, a),
        Command::HestonHedge(a) => run_experiment(Experiment::HestonHedge, a),
        Command::Merton(a) => run_experiment(Experiment::Merton, a),
        Command::Oracle(a) => run_experiment(Experiment::Oracle, a),
        Command::EmitPlots { out } => emit_plot_data(out).map(|files| {
            for f in files {
                println!("{}", f.display());
            }
        }),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("derm-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
