use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand as ClapSubcommand};

use coasting_cli::config::{Overrides, RunConfig};
use coasting_cli::pipeline::{run_subcommand, Subcommand};

/// Batch analytics for classwork practice logs: turns raw transaction logs
/// into session classifications, coasting measures, reliability estimates,
/// and mixed-model summaries, with a seeded simulator as a built-in oracle.
#[derive(Parser)]
#[command(name = "coasting", version, about, max_term_width = 100)]
struct Cli {
    /// Plain-text `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Random seed for `simulate` (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Burst split threshold in minutes.
    #[arg(long, global = true)]
    split_gap_mins: Option<i64>,

    /// Idle threshold in seconds.
    #[arg(long, global = true)]
    idle_threshold_secs: Option<i64>,

    /// Peak-concurrency threshold for classwork (strictly greater than).
    #[arg(long, global = true)]
    min_concurrency: Option<u32>,

    #[command(subcommand)]
    command: Command,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Validate and summarize the input files.
    Ingest,
    /// Infer and classify class sessions.
    Sessions,
    /// Compute per-(student, session) coasting records and aggregates.
    Coasting,
    /// Estimate variance components and reliability coefficients.
    Gstudy,
    /// Fit the mixed-model families.
    Models,
    /// Generate a synthetic corpus with exact ground truth.
    Simulate,
    /// Produce the collated tables and figure data.
    Report,
    /// Run the whole pipeline.
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        out: cli.out,
        seed: cli.seed,
        split_gap_mins: cli.split_gap_mins,
        idle_threshold_secs: cli.idle_threshold_secs,
        min_concurrency: cli.min_concurrency,
    };
    let subcommand = match cli.command {
        Command::Ingest => Subcommand::Ingest,
        Command::Sessions => Subcommand::Sessions,
        Command::Coasting => Subcommand::Coasting,
        Command::Gstudy => Subcommand::Gstudy,
        Command::Models => Subcommand::Models,
        Command::Simulate => Subcommand::Simulate,
        Command::Report => Subcommand::Report,
        Command::All => Subcommand::All,
    };

    let result = RunConfig::load(cli.config.as_deref(), &overrides)
        .and_then(|config| run_subcommand(subcommand, &config));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({ "error": format!("{err:#}") });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
