//! `ces`: the calibrate-emulate-sample pipeline over a run directory.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 missing or stale upstream stage, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing::error;

use ces_core::error::Result;
use ces_core::pipeline::{self, PipelineConfig, ReportOutcome, Run, StageRecord};

#[derive(Parser)]
#[command(name = "ces", version, about = "Calibrate-emulate-sample pipeline")]
struct Cli {
    /// Worker threads for parallel model evaluation (default: all cores).
    #[arg(long, global = true, env = "CES_THREADS")]
    threads: Option<usize>,
    /// Log verbosity: -v for debug, -vv for trace.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory.
    #[arg(long, env = "CES_RUN_DIR")]
    run: PathBuf,
    /// Realization index (1-based); all realizations when omitted.
    #[arg(long)]
    realization: Option<usize>,
}

#[derive(Args)]
struct TruthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = "CES_RUN_DIR")]
    run: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// When given, the run directory must have been created with it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "CES_RUN_DIR")]
    run: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Lorenz96,
    Linear,
}

#[derive(Subcommand)]
enum Command {
    /// Long control run, noise covariances and noisy data realizations.
    GenerateTruth(TruthArgs),
    /// Ensemble Kalman inversion; collects the emulator training pairs.
    Calibrate(StageArgs),
    /// Trains and validates the Gaussian-process emulator.
    Emulate(StageArgs),
    /// MCMC on the emulated posterior.
    Sample(StageArgs),
    /// Forward prediction bands and exceedance study from posterior draws.
    Predict(StageArgs),
    /// Grid-trained emulator and its posterior, for comparison.
    Benchmark(StageArgs),
    /// Consolidated report and plotting tables from completed stages.
    Report(ReportArgs),
    /// Every stage for every (or one) realization, then the report.
    All(StageArgs),
    /// Prints a complete configuration with default values.
    DefaultConfig {
        #[arg(long, value_enum, default_value = "lorenz96")]
        model: Preset,
    },
}

type Stage = fn(&Run, usize) -> Result<StageRecord>;

fn open(config: &Path, dir: &Path) -> Result<Run> {
    Run::open(dir, PipelineConfig::load(config)?)
}

fn realizations(run: &Run, k: Option<usize>) -> Vec<usize> {
    match k {
        Some(k) => vec![k],
        None => (1..=run.config().realizations).collect(),
    }
}

fn run_stage(a: &StageArgs, stage: Stage) -> Result<()> {
    let run = open(&a.config, &a.run)?;
    for k in realizations(&run, a.realization) {
        stage(&run, k)?;
    }
    Ok(())
}

fn print_report(dir: &Path) -> Result<()> {
    match pipeline::report(dir)? {
        ReportOutcome::NoCompletedStages => println!("no completed stages in {}", dir.display()),
        ReportOutcome::Written(r) => {
            println!("report written to {}", dir.join("report").display());
            for rr in &r.realizations {
                if let Some(c) = &rr.cost {
                    println!(
                        "realization {}: {} forward evaluations, {} emulator queries (ratio {:.1})",
                        rr.realization,
                        c.forward_evaluations,
                        c.emulator_queries,
                        c.evaluations_avoided_ratio
                    );
                }
            }
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateTruth(a) => pipeline::generate_truth(&open(&a.config, &a.run)?).map(drop),
        Command::Calibrate(a) => run_stage(&a, pipeline::calibrate),
        Command::Emulate(a) => run_stage(&a, pipeline::emulate),
        Command::Sample(a) => run_stage(&a, pipeline::sample),
        Command::Predict(a) => run_stage(&a, pipeline::predict),
        Command::Benchmark(a) => run_stage(&a, pipeline::benchmark),
        Command::Report(a) => {
            if let Some(c) = &a.config {
                open(c, &a.run)?;
            }
            print_report(&a.run)
        }
        Command::All(a) => {
            let run = open(&a.config, &a.run)?;
            pipeline::generate_truth(&run)?;
            let stages: [Stage; 5] = [
                pipeline::calibrate,
                pipeline::emulate,
                pipeline::sample,
                pipeline::predict,
                pipeline::benchmark,
            ];
            for k in realizations(&run, a.realization) {
                for s in stages {
                    s(&run, k)?;
                }
            }
            print_report(&a.run)
        }
        Command::DefaultConfig { model } => {
            let cfg = match model {
                Preset::Lorenz96 => PipelineConfig::default(),
                Preset::Linear => PipelineConfig::linear_default(),
            };
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_env_filter(tracing_subscriber::EnvFilter::new(level))
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            error!(%e, "could not size the thread pool");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
