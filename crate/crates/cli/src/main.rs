//! Batch driver: training runs, evaluation, the four-variant ablation,
//! hyperparameter sweeps, and dataset generation. Config files are JSON
//! (unknown keys rejected); every artifact embeds the config hash and seed.
//! MMPT_THREADS caps internal parallelism.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmpt_core::experiment::{
    init_threads, run_ablation, run_dataset_gen, run_eval, run_sweep, run_train, EvalSource,
    ExperimentConfig, RunOutcome, SweepAxis,
};
use mmpt_core::{MmptError, Result};

#[derive(Parser)]
#[command(
    name = "mmpt",
    about = "Prompt-tuned compositional recognition: train, evaluate, ablate, sweep",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, logs, curve, and summary.
    Train {
        /// Experiment config JSON; omitted means the built-in toy preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for run artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Override both the model and data seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint, or run metrics-only over a stored score table.
    Eval {
        /// Experiment config JSON describing the data (checkpoint mode).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory to load (checkpoint mode).
        #[arg(long, conflicts_with = "score_table")]
        checkpoint: Option<PathBuf>,
        /// Stored score table (.json or .csv) for model-free metrics.
        #[arg(long, requires = "space")]
        score_table: Option<PathBuf>,
        /// Composition space file that owns the seen/unseen split.
        #[arg(long)]
        space: Option<PathBuf>,
        /// Output directory for curve and summary.
        #[arg(long)]
        out: PathBuf,
        /// Override both the model and data seeds (checkpoint mode).
        #[arg(long)]
        seed: Option<u64>,
        /// Accept a checkpoint whose config hash differs from the config.
        #[arg(long)]
        force: bool,
        /// Also emit an SVG plot of the unseen-vs-seen curve.
        #[arg(long)]
        svg: bool,
    },
    /// Train all four prompt variants on identical data; emit one CSV table.
    Ablation {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep one axis over its reference value list; emit one CSV table.
    Sweep {
        /// Axis preset: ctx, depth, dim, or len.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render the synthetic dataset splits to disk.
    DatasetGen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.data.seed = s;
    }
    Ok(cfg)
}

fn print_outcome(what: &str, outcome: &RunOutcome) {
    let m = &outcome.summary.metrics;
    println!(
        "{what}: S {:.2}  U {:.2}  HM {:.2}  AUC {:.2}  (config {} seed {})",
        m.s,
        m.u,
        m.hm,
        m.auc,
        &outcome.summary.config_hash[..12.min(outcome.summary.config_hash.len())],
        outcome.summary.seed
    );
    println!("artifacts in {}", outcome.out_dir.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let outcome = run_train(&cfg, &out)?;
            print_outcome("trained", &outcome);
        }
        Command::Eval { config, checkpoint, score_table, space, out, seed, force, svg } => {
            let source = match (checkpoint, score_table) {
                (Some(ckpt), None) => EvalSource::Checkpoint {
                    config: load_config(&config, seed)?,
                    checkpoint: ckpt,
                    force,
                },
                (None, Some(table)) => {
                    let space = space.ok_or_else(|| {
                        MmptError::config("--score-table requires --space")
                    })?;
                    EvalSource::Table { table, space }
                }
                _ => {
                    return Err(MmptError::config(
                        "eval needs exactly one of --checkpoint or --score-table",
                    ));
                }
            };
            let outcome = run_eval(source, &out, svg)?;
            print_outcome("evaluated", &outcome);
        }
        Command::Ablation { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let table = run_ablation(&cfg, &out)?;
            println!("ablation table at {}", table.display());
        }
        Command::Sweep { preset, config, out, seed } => {
            let axis = SweepAxis::parse(&preset)?;
            let cfg = load_config(&config, seed)?;
            let table = run_sweep(axis, &cfg, &out)?;
            println!("sweep table at {}", table.display());
        }
        Command::DatasetGen { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            run_dataset_gen(&cfg, &out)?;
            println!("dataset splits in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_threads();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
