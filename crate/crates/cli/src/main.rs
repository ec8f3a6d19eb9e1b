use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sievae_cli::commands::{cmd_generate, cmd_train, TrainArgs};
use sievae_cli::config::{ExperimentConfig, Profile};
use sievae_cli::report::cmd_report;
use sievae_cli::sweep::run_sweep;

#[derive(Parser)]
#[command(name = "sievae", version, about = "Synthetic-phantom autoencoder experiments with outlier removal")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file overriding the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base profile: desk or paper.
    #[arg(long, global = true)]
    profile: Option<Profile>,
    /// Master seed; for `sweep`, restricts the run to this one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write one dataset bundle per configured impurity ratio.
    Generate,
    /// Train and evaluate one model.
    Train {
        /// Bundle directory written by `generate`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Impurity ratio when no dataset is given.
        #[arg(long, default_value_t = 0.0)]
        impurity: f64,
        #[arg(long, conflicts_with = "no_removal")]
        gamma: Option<f64>,
        /// Baseline: no removal and no re-initialization.
        #[arg(long)]
        no_removal: bool,
    },
    /// Run the configured grid and write metrics.csv.
    Sweep,
    /// Aggregate a metrics.csv into summary tables.
    Report {
        /// Defaults to `<out>/metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let c = cli.common;
    let mut config = ExperimentConfig::load(c.profile, c.config.as_deref())?;
    if let Some(seed) = c.seed {
        config.seed = seed;
        config.sweep.seeds = vec![seed];
    }
    let jobs = c
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if !matches!(cli.command, Command::Sweep) {
        rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global()?;
    }

    match cli.command {
        Command::Generate => {
            for dir in cmd_generate(&config, &c.out)? {
                println!("{}", dir.display());
            }
        }
        Command::Train {
            dataset,
            impurity,
            gamma,
            no_removal,
        } => {
            let args = TrainArgs {
                dataset,
                impurity,
                gamma,
                no_removal,
            };
            let row = cmd_train(&config, &args, &c.out)?;
            println!(
                "auroc {:.4}  removed {} healthy, {} unhealthy  -> {}",
                row.auroc.unwrap_or(f64::NAN),
                row.removed_healthy.unwrap_or(0),
                row.removed_unhealthy.unwrap_or(0),
                c.out.display()
            );
        }
        Command::Sweep => {
            let outcome = run_sweep(&config, &c.out, jobs)?;
            println!(
                "{} cells ({} resumed, {} failed) -> {}",
                outcome.rows.len(),
                outcome.resumed,
                outcome.failed(),
                c.out.join("metrics.csv").display()
            );
            if outcome.failed() > 0 {
                anyhow::bail!("{} cells failed; see their run.json", outcome.failed());
            }
        }
        Command::Report { metrics } => {
            let metrics = metrics.unwrap_or_else(|| c.out.join("metrics.csv"));
            let report = cmd_report(&metrics, &c.out)?;
            println!(
                "{} impurity rows, {} gamma rows, {} fraction rows ({} failed inputs skipped) -> {}",
                report.by_impurity.len(),
                report.by_gamma.len(),
                report.fractions.len(),
                report.skipped_failed,
                c.out.display()
            );
        }
    }
    Ok(())
}
