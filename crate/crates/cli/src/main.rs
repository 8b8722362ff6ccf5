mod commands;
mod config;
mod metrics;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

/// Long-sequence encoder experiments: training, evaluation, cost benchmarks
/// and cluster inspection.
#[derive(Parser, Debug)]
#[command(name = "longseq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a TOML config; writes metrics, a checkpoint and a test summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset cache or on the test split of a config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset cache written by `train` (one example per line).
        #[arg(long)]
        data: Option<PathBuf>,
        /// accuracy, perplexity or bits-per-char; defaults by model mode.
        #[arg(long)]
        metric: Option<String>,
    },
    /// Print the attention score cost of each pattern as CSV.
    Bench {
        /// Comma-separated context lengths.
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
        x: Vec<u64>,
        /// Comma-separated patterns: full, sliding, cluster, lsh, sparse-position.
        #[arg(long, value_delimiter = ',', default_value = "full,sliding,cluster,lsh,sparse-position")]
        pattern: Vec<String>,
        #[arg(long, default_value_t = 0)]
        q: u64,
        #[arg(long, default_value_t = 64)]
        l: u64,
        #[arg(long, default_value_t = 48)]
        m: u64,
        #[arg(long, default_value_t = 64)]
        d: u64,
    },
    /// Show cluster sizes, member positions and centroid tour cosines of one example.
    ClusterStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Index into the test split or cache.
        #[arg(long, default_value_t = 0)]
        example: usize,
        /// Member positions listed per cluster.
        #[arg(long, default_value_t = 8)]
        positions: usize,
    },
}

fn set_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LONGSEQ_THREADS") {
        let n: usize = v.parse().with_context(|| format!("LONGSEQ_THREADS: `{v}` is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    set_threads()?;
    match cli.command {
        Command::Train { config, resume } => commands::train(&config, resume.as_deref()),
        Command::Eval { checkpoint, config, data, metric } => {
            commands::eval(&checkpoint, config.as_deref(), data.as_deref(), metric.as_deref())
        }
        Command::Bench { x, pattern, q, l, m, d } => commands::bench(&x, &pattern, q, l, m, d),
        Command::ClusterStats { checkpoint, config, data, example, positions } => {
            commands::cluster_stats(&checkpoint, config.as_deref(), data.as_deref(), example, positions)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
