use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use modnorm::experiment::{self, ExperimentConfig, Overrides};
use modnorm::gap::Tap;
use modnorm::norm::NormKind;

#[derive(Parser)]
#[command(name = "modnorm", version, about = "Modality batch normalization experiments")]
struct Cli {
    /// Experiment config (ini sections); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; repeat for several runs.
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    /// Output directory (default `runs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// bn, mbn_shared or mbn_specific for every backbone norm layer.
    #[arg(long, global = true)]
    norm_backbone: Option<NormKind>,
    /// bn, mbn_shared or mbn_specific for the head norm layer.
    #[arg(long, global = true)]
    norm_head: Option<NormKind>,
    /// Seed of the synthetic dataset.
    #[arg(long, global = true)]
    dataset_seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset.
    Generate,
    /// Train every (configuration, seed) pair and summarize.
    Train,
    /// Gap statistics, histograms and per-stage traces.
    Gap {
        /// Trace post-affine activations instead of pre-affine.
        #[arg(long)]
        post_affine: bool,
        /// Analyze a saved checkpoint (path without extension).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Merge CSV outputs into a Markdown report.
    Report,
}

fn run(cli: Cli) -> modnorm::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seeds: cli.seeds,
        out_dir: cli.out,
        norm_backbone: cli.norm_backbone,
        norm_head: cli.norm_head,
        dataset_seed: cli.dataset_seed,
    })?;
    match cli.command {
        Command::Generate => {
            let dir = experiment::cmd_generate(&cfg)?;
            println!("{}", dir.display());
        }
        Command::Train => {
            experiment::cmd_train(&cfg)?;
            let rows = experiment::read_summary(&experiment::summary_path(&cfg))?;
            for r in rows {
                println!(
                    "{}\trank1 {:.4} ± {:.4}\tmAP {:.4} ± {:.4}",
                    r.configuration, r.rank1_mean, r.rank1_std, r.map_mean, r.map_std
                );
            }
        }
        Command::Gap { post_affine, checkpoint } => {
            if post_affine {
                cfg.gap.tap = Tap::PostAffine;
            }
            if checkpoint.is_some() {
                cfg.gap.checkpoint = checkpoint;
            }
            let outcome = experiment::cmd_gap(&cfg)?;
            println!("{}", outcome.dir.display());
        }
        Command::Report => {
            println!("{}", experiment::cmd_report(&cfg)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error kind=UsageError message={first:?}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} message={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}
