//! `profile-rec`: ingest review dumps, run the method matrix, report.
//!
//! Exit codes: 0 success, 1 ingest or I/O failure, 2 configuration error
//! (including a missing run), 3 backend exhausted.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use profile_rec::Mode;

use config::{BackendKind, Overrides};

#[derive(Parser)]
#[command(
    name = "profile-rec",
    version,
    about = "Profile-based LLM recommendation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse reviews and metadata into per-user histories.
    Ingest(IngestArgs),
    /// Evaluate the configured methods; resumes when the run id exists.
    Run(RunArgs),
    /// Print the result tables of a run.
    Report(ReportArgs),
    /// Emit the bucketed NDCG / prompt-size trade-off CSV of a run.
    PlotData(PlotArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Review dump (JSONL, optionally gzipped).
    #[arg(long, requires = "metadata")]
    pub reviews: Option<PathBuf>,
    /// Item metadata (JSONL, optionally gzipped).
    #[arg(long, requires = "reviews")]
    pub metadata: Option<PathBuf>,
    /// Histories output; the summary goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub min_interactions: Option<usize>,
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<Mode>,
}

#[derive(Args)]
pub struct RunLocation {
    #[arg(long)]
    pub run_id: String,
    /// Take the runs directory from this config.
    #[arg(long, conflicts_with = "runs_dir")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub run: RunLocation,
    /// Print the metrics CSV instead of the text tables.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args)]
pub struct PlotArgs {
    #[command(flatten)]
    pub run: RunLocation,
    /// NDCG cutoff; defaults to the one the run was configured with.
    #[arg(long)]
    pub k: Option<usize>,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            run_id: self.run_id.clone(),
            backend: self.backend,
            seed: self.seed,
            mode: self.mode,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Run(a) => commands::run(a, &a.overrides()),
        Command::Report(a) => commands::report(a),
        Command::PlotData(a) => commands::plot_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
