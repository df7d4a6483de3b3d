//! Experiment orchestration CLI: `train`, `measure`, `intervene`, `sweep`,
//! and `report` subcommands over a single JSON config with `--set` overrides.
//!
//! Exit codes: 0 success, 2 config error, 3 diverged training.

mod config;
mod manifest;
mod recipes;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::{ExperimentConfig, Recipe};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}{}", last_checkpoint.as_ref().map(|p| format!(" (last checkpoint: {p})")).unwrap_or_default())]
    Diverged { step: u64, last_checkpoint: Option<String> },
    #[error("{0}")]
    Other(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<indlab::measures::MeasureError> for CliError {
    fn from(e: indlab::measures::MeasureError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<indlab::intervene::InterveneError> for CliError {
    fn from(e: indlab::intervene::InterveneError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<indlab::model::checkpoint::CheckpointError> for CliError {
    fn from(e: indlab::model::checkpoint::CheckpointError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<indlab::model::ModelError> for CliError {
    fn from(e: indlab::model::ModelError) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "indlab", version, about = "Induction-head composition lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Flat overrides of the form `train.lr=0.001`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and record the training-dynamics metrics
    /// (recipe: train_dynamics).
    Train(ConfigArgs),
    /// Run the measure suite on a saved checkpoint and print the report.
    Measure {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory (manifest.json + weights.bin).
        #[arg(long)]
        ckpt: PathBuf,
        /// Write the JSON report here instead of stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run intervention recipes (intervention_suite or spiked_oracle).
    Intervene {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Reuse a trained checkpoint instead of training first
        /// (intervention_suite only).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Run sweep recipes (pool_sweep, rope_delta_sweep, rank_sweep).
    Sweep(ConfigArgs),
    /// Summarize a completed run directory.
    Report {
        /// Run directory (e.g. runs/default).
        #[arg(long)]
        run: PathBuf,
    },
}

fn init_threads() {
    if let Ok(v) = std::env::var("INDLAB_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        } else {
            eprintln!("warning: ignoring unparsable INDLAB_THREADS={v:?}");
        }
    }
}

fn expect_recipe(cfg: &ExperimentConfig, allowed: &[Recipe], cmd: &str) -> Result<(), CliError> {
    if allowed.contains(&cfg.recipe) {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "recipe {} is not runnable via `{cmd}` (expected one of: {})",
            cfg.recipe,
            allowed.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(", ")
        )))
    }
}

fn run() -> Result<(), CliError> {
    init_threads();
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let cfg = ExperimentConfig::load(&args.config, &args.set)?;
            expect_recipe(&cfg, &[Recipe::TrainDynamics], "train")?;
            let manifest = recipes::run(&cfg)?;
            println!("run complete: {}", cfg.run_dir().display());
            println!("artifacts: {}", manifest.artifacts.len());
            Ok(())
        }
        Command::Sweep(args) => {
            let cfg = ExperimentConfig::load(&args.config, &args.set)?;
            expect_recipe(
                &cfg,
                &[Recipe::PoolSweep, Recipe::RopeDeltaSweep, Recipe::RankSweep],
                "sweep",
            )?;
            let manifest = recipes::run(&cfg)?;
            println!("run complete: {}", cfg.run_dir().display());
            println!("artifacts: {}", manifest.artifacts.len());
            Ok(())
        }
        Command::Intervene { cfg, ckpt } => {
            let cfg_parsed = ExperimentConfig::load(&cfg.config, &cfg.set)?;
            expect_recipe(
                &cfg_parsed,
                &[Recipe::InterventionSuite, Recipe::SpikedOracle],
                "intervene",
            )?;
            let manifest = match (&ckpt, cfg_parsed.recipe) {
                (Some(path), Recipe::InterventionSuite) => {
                    recipes::run_intervene_on(&cfg_parsed, path)?
                }
                (Some(_), _) => {
                    return Err(CliError::Config(
                        "--ckpt only applies to the intervention_suite recipe".into(),
                    ))
                }
                (None, _) => recipes::run(&cfg_parsed)?,
            };
            println!("run complete: {}", cfg_parsed.run_dir().display());
            println!("artifacts: {}", manifest.artifacts.len());
            Ok(())
        }
        Command::Measure { cfg, ckpt, out } => {
            let cfg = ExperimentConfig::load(&cfg.config, &cfg.set)?;
            let params = indlab::model::checkpoint::load_expecting(&ckpt, &cfg.model)?;
            let source =
                indlab::datagen::DataSource::new(cfg.data.clone(), cfg.model.vocab, cfg.seed)
                    .map_err(|e| CliError::Config(e.to_string()))?;
            let ctx =
                indlab::measures::EvalContext::build(cfg.seed, &source, &cfg.model, &cfg.measure)?;
            let report = indlab::measures::measure_suite(&params, &ctx, &cfg.measure, 0, f64::NAN)?;
            let table = indlab::measures::rank_heads(
                &params,
                cfg.intervention.score_probe_count,
                cfg.intervention.score_block_len,
                cfg.seed,
            )?;
            let doc = serde_json::json!({
                "report": report,
                "head_scores": table,
            });
            let body = serde_json::to_string_pretty(&doc).expect("report serializes");
            if let Some(path) = out {
                std::fs::write(&path, &body)?;
                println!("wrote {}", path.display());
            }
            println!("{body}");
            Ok(())
        }
        Command::Report { run } => {
            let summary = report::summarize(&run)?;
            report::print_summary(&summary);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e @ CliError::Diverged { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
