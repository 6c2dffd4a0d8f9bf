mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use run_config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "ocor", version, about = "Overlap-aware code retrieval")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true, env = run_config::CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Worker threads for evaluation and feature preparation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenize a corpus, print its statistics, optionally build retrieval cases.
    Preprocess {
        #[arg(long)]
        corpus: PathBuf,
        /// Tokenized corpus, one JSON record per line.
        #[arg(long)]
        out: PathBuf,
        /// Also write retrieval cases (one positive plus `--negatives` others).
        #[arg(long)]
        cases_out: Option<PathBuf>,
        #[arg(long, default_value_t = 49)]
        negatives: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write checkpoints plus a JSON-lines log.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Retrieval cases for dev-set model selection.
        #[arg(long)]
        dev_cases: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Print the effective configuration and exit.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Rank retrieval cases and report MRR, optionally ensembled with score files.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        cases: PathBuf,
        /// External model scores, one JSON record per line.
        #[arg(long = "scores")]
        scores: Vec<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Results file with per-case ranks.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the perfect-ranking set report here.
        #[arg(long)]
        perfect_sets: Option<PathBuf>,
    },
    /// Rank candidate snippets for one query.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: String,
        /// Candidates, one `{"id": .., "code": ..}` record per line.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Print the overlap matrix of a query and a snippet as TSV.
    Overlap {
        #[arg(long)]
        query: String,
        #[arg(long)]
        code: String,
        /// `lcs` or `lcp`.
        #[arg(long, default_value = "lcs")]
        metric: String,
        /// Label rows and columns with their tokens.
        #[arg(long)]
        labels: bool,
    },
    /// List parameter names, shapes and counts.
    Describe {
        /// Describe a saved model instead of the configured one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
