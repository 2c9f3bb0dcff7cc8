//! `prefill-lab`: command-line front end wiring models, ranking pipelines,
//! evaluation, and benchmarks into reproducible experiments.
//!
//! Every command honors the global `--seed`; with equal seeds all
//! non-timing outputs are byte-identical across reruns. Exit codes: 0 on
//! success, 1 for usage or configuration errors, 2 for runtime failures.
//! stderr carries human-readable diagnostics; stdout stays clean for data.

mod cmd;
mod config;
mod prompts;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "prefill-lab",
    version,
    about = "Prefill-pruning laboratory: token ranking, pruned prefill, evaluation, and benchmarks"
)]
struct Cli {
    /// Base RNG seed for model init, prompt generation, and oracles.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a randomly initialized model container to disk.
    GenModel(cmd::gen_model::GenModelArgs),
    /// Score prompts with each ranking method; emit score CSVs and
    /// kept-set summaries.
    Rank(config::ExperimentArgs),
    /// Layer-wise Spearman correlation of every heuristic against the
    /// answer-informed oracle.
    Correlate(config::ExperimentArgs),
    /// Run the full method x keep-rate grid and emit a sweep report.
    Sweep(config::ExperimentArgs),
    /// Generate needle-in-a-haystack prompts and their expected answers.
    Niah(cmd::niah::NiahArgs),
    /// Measure TTFT (and optional decode throughput) per method and rate.
    Bench(config::ExperimentArgs),
}

/// Command failures, split by exit code: flag/config mistakes exit 1,
/// failures while running the experiment exit 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

/// Shorthand for a usage/configuration error (exit code 1).
pub fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

/// Shorthand for a runtime error (exit code 2).
pub fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version print to stdout and exit 0; real parse
            // errors go to stderr and exit as usage errors.
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let seed = cli.seed;
    let result = match cli.command {
        Command::GenModel(args) => cmd::gen_model::run(seed, &args),
        Command::Rank(args) => cmd::rank::run(seed, &args),
        Command::Correlate(args) => cmd::correlate::run(seed, &args),
        Command::Sweep(args) => cmd::sweep::run(seed, &args),
        Command::Niah(args) => cmd::niah::run(seed, &args),
        Command::Bench(args) => cmd::bench::run(seed, &args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
