//! `hiqc` — train, self-train, evaluate, and operate hierarchical query
//! classifiers from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "hiqc",
    about = "Hierarchical query classification: label-graph features, contrastive training, neighborhood-aware self-training",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Taxonomy file (parents flush-left, children indented two spaces)
    #[arg(long)]
    taxonomy: PathBuf,
    /// Query TSV: `id \t text \t child_label` (label may be empty)
    #[arg(long)]
    queries: PathBuf,
    /// Optional external embedding file (`N d` header then `id v1..vd` rows)
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override applied to every seeded stage
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Check taxonomy and query files; exit 0 iff clean
    Validate {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Train a classifier and write a checkpoint plus the training report
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train, then grow the labeled set by neighborhood-aware self-training
    Selftrain {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Classify queries with a trained checkpoint
    Predict {
        #[command(flatten)]
        data: DataArgs,
        /// Trained checkpoint to load
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint against labeled queries
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// One-factor-at-a-time sweep over contrastive and sampling weights
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate a synthetic hierarchical corpus with typos and an unlabeled pool
    GenSynthetic {
        #[command(flatten)]
        run: RunArgs,
    },
}

fn load_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("HIQC_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
            }
        }
    }
}

fn run() -> Result<i32> {
    let cli = Cli::parse();
    init_thread_pool();
    match cli.command {
        Command::Validate { taxonomy, queries } => {
            Ok(commands::cmd_validate(&taxonomy, queries.as_deref()))
        }
        Command::Train { data, run } => {
            let cfg = load_config(&run)?;
            let inputs =
                commands::load_inputs(&data.taxonomy, &data.queries, data.embeddings.as_deref())?;
            commands::cmd_train(&inputs, &cfg, &run.out)?;
            Ok(0)
        }
        Command::Selftrain { data, run } => {
            let cfg = load_config(&run)?;
            let inputs =
                commands::load_inputs(&data.taxonomy, &data.queries, data.embeddings.as_deref())?;
            commands::cmd_selftrain(&inputs, &cfg, &run.out)?;
            Ok(0)
        }
        Command::Predict { data, checkpoint, run } => {
            let cfg = load_config(&run)?;
            let inputs =
                commands::load_inputs(&data.taxonomy, &data.queries, data.embeddings.as_deref())?;
            commands::cmd_predict(&inputs, &checkpoint, &cfg, &run.out)?;
            Ok(0)
        }
        Command::Eval { data, checkpoint, run } => {
            let cfg = load_config(&run)?;
            let inputs =
                commands::load_inputs(&data.taxonomy, &data.queries, data.embeddings.as_deref())?;
            commands::cmd_eval(&inputs, &checkpoint, &cfg, &run.out)?;
            Ok(0)
        }
        Command::Sweep { data, run } => {
            let cfg = load_config(&run)?;
            let inputs =
                commands::load_inputs(&data.taxonomy, &data.queries, data.embeddings.as_deref())?;
            commands::cmd_sweep(&inputs, &cfg, &run.out)?;
            Ok(0)
        }
        Command::GenSynthetic { run } => {
            let cfg = load_config(&run)?;
            commands::cmd_gen_synthetic(&run.out, &cfg)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
