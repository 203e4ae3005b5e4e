mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use loca_core::baselines::BaselineKind;
use loca_core::review_loop::Ablation;

#[derive(Parser)]
#[command(name = "loca", version, about = "Clean scientific question-answer corpora by augmentation and review")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the augment-and-review loop over a corpus and partition it.
    Clean(CleanArgs),
    /// Filter a corpus with one of the comparison methods.
    Baseline(BaselineArgs),
    /// Recompute metrics from a run directory's decision checkpoint.
    Report(ReportArgs),
    /// Clean a corpus while recording every model reply into a replay script.
    ReplayRecord(RecordArgs),
    /// Serve the expert review API over a run directory.
    Serve(ServeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSONL corpus with `id`, `question` and `raw_answer` per line.
    #[arg(long)]
    corpus: PathBuf,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for decisions, partitions and the report.
    #[arg(long)]
    out: PathBuf,
    /// Continue an interrupted run, skipping pairs already decided.
    #[arg(long)]
    resume: bool,
    /// Seed for symbolic sampling and retry jitter.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Stop after deciding this many pairs.
    #[arg(long)]
    max_pairs: Option<usize>,
}

#[derive(Args)]
struct CleanArgs {
    #[command(flatten)]
    run: RunArgs,
    /// `loca`, `generic_augment`, `holistic_review` or `generic_both`.
    #[arg(long)]
    ablation: Option<Ablation>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    run: RunArgs,
    /// `direct`, `zero_shot_cot`, `few_shot_cot`, `cot_sc`, `review_sc` or `self_reflection`.
    #[arg(long)]
    kind: BaselineKind,
}

#[derive(Args)]
struct ReportArgs {
    run_dir: PathBuf,
    /// Corpus to read expert labels from; defaults to the partition files.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Print the metrics as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RecordArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Where to write the replay script.
    #[arg(long)]
    script: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    run_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Directory of static files served next to the API.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Clean(args) => commands::clean(args).await,
        Command::Baseline(args) => commands::baseline(args).await,
        Command::Report(args) => commands::report(args),
        Command::ReplayRecord(args) => commands::replay_record(args).await,
        Command::Serve(args) => commands::serve(args).await,
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
