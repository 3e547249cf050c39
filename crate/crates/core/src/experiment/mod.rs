//! Reproducible experiments behind the `modnorm` command: dataset
//! generation, ablation training, gap analysis and reporting.

mod commands;
mod config;

pub use commands::{
    cmd_gap, cmd_generate, cmd_report, cmd_train, gap_dir, load_dataset, mean_std, read_summary, run_dir,
    summarize, summary_path, thread_pool, GapOutcome, RunOutcome, SummaryRow, THREADS_ENV,
};
pub use config::{ExperimentConfig, GapSettings, NormSetup, Overrides};
