//! `mddkit`: synthesize corpora, train the toy models, decode and score.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mddkit_core::decode::DecodeMode;
use mddkit_core::train::Stage;

use crate::config::{RunConfig, SEED_ENV};
use crate::exit::CliError;

#[derive(Debug, Parser)]
#[command(name = "mddkit", version, about = "Mispronunciation detection toolkit on synthetic data")]
struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus into `paths.data_dir`.
    Synth,
    /// Train one stage into `paths.run_dir/<stage>`.
    Train {
        #[arg(long)]
        stage: Stage,
        /// Continue from `last.ckpt` if present.
        #[arg(long)]
        resume: bool,
    },
    /// Decode a split to JSON lines.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mode: DecodeMode,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against a manifest.
    Score {
        #[arg(long)]
        predictions: PathBuf,
        /// Defaults to the test manifest under `paths.data_dir`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-utterance counts as CSV.
        #[arg(long)]
        utterances: Option<PathBuf>,
    },
    /// Joint decoding over a grid of AM weights.
    SweepLambda {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        lambdas: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Posterior grid, transport plan and attention maps for one utterance.
    DumpAlignment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        /// Negate analytic gradients; every check should then fail.
        #[arg(long)]
        flip_sign: bool,
    },
    /// Print the effective configuration as TOML.
    PrintConfig,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg: RunConfig = config::load(cli.config.as_deref(), env_seed.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Train { stage, resume } => commands::train(&cfg, stage, resume),
        Command::Decode {
            checkpoint,
            mode,
            split,
            out,
        } => commands::decode(&cfg, &checkpoint, mode, &split, out.as_deref()),
        Command::Score {
            predictions,
            manifest,
            out,
            utterances,
        } => {
            let manifest = manifest.unwrap_or_else(|| mddkit_core::synth::manifest_path(&cfg.paths.data_dir, "test"));
            commands::score(&predictions, &manifest, out.as_deref(), utterances.as_deref())
        }
        Command::SweepLambda {
            checkpoint,
            lambdas,
            split,
            out,
        } => {
            let grid = commands::parse_lambdas(&lambdas)?;
            commands::sweep_lambda(&cfg, &checkpoint, &grid, &split, out.as_deref())
        }
        Command::DumpAlignment {
            checkpoint,
            id,
            split,
            out,
        } => commands::dump_alignment(&cfg, &checkpoint, &id, &split, &out),
        Command::Gradcheck { flip_sign } => commands::gradcheck(&cfg, flip_sign),
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mddkit: {e}");
            e.exit_code()
        }
    }
}
