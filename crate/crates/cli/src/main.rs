//! `lors`: desk-scale multimodal dataset distillation with low-rank
//! similarity mining.
//!
//! Run definitions live in a TOML config file; flags carry only paths, seed
//! overrides, and ablation toggles. Exit codes: 0 success, 2 configuration
//! errors, 3 file/format errors, 4 numerical aborts.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::AblationFlags;
use lors_core::Error;

#[derive(Parser)]
#[command(name = "lors", version, about = "Multimodal dataset distillation with low-rank similarity mining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired toy dataset (train/test LEPD files).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train expert trajectories on a dataset into a store directory.
    TrainExperts {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override the base seed for the expert runs.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill a synthetic dataset against an expert store.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        fix_image: bool,
        #[arg(long)]
        fix_text: bool,
        #[arg(long)]
        fix_similarity: bool,
        #[arg(long)]
        no_lr_residual: bool,
        #[arg(long)]
        no_omega: bool,
        #[arg(long)]
        fix_lr: bool,
    },
    /// Train fresh students on an artifact and report retrieval recalls.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Select a coreset baseline and package it as an identity artifact.
    Coreset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Duplicate-probe distillation and similarity spectra.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Analyze an existing artifact instead of running the probe.
        #[arg(long)]
        artifact: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numeric(_) | Error::NonDifferentiable { .. } | Error::Shape { .. } => 4,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { config, out_dir, seed } => {
            let cfg = config::load_config(&config)?;
            let out = commands::resolve_out_dir(out_dir, &cfg);
            commands::cmd_gen_data(&cfg, &out, seed)
        }
        Command::TrainExperts { config, dataset, out_dir, seed } => {
            let cfg = config::load_config(&config)?;
            let out = commands::resolve_out_dir(out_dir, &cfg).join("experts");
            commands::cmd_train_experts(&cfg, &dataset, &out, seed)
        }
        Command::Distill {
            config,
            dataset,
            store,
            out_dir,
            seed,
            fix_image,
            fix_text,
            fix_similarity,
            no_lr_residual,
            no_omega,
            fix_lr,
        } => {
            let cfg = config::load_config(&config)?;
            let out = commands::resolve_out_dir(out_dir, &cfg);
            commands::cmd_distill(
                &cfg,
                &dataset,
                &store,
                &out,
                seed,
                AblationFlags { fix_image, fix_text, fix_similarity, no_lr_residual, no_omega, fix_lr },
            )
        }
        Command::Eval { config, artifact, test, out_dir } => {
            let cfg = config::load_config(&config)?;
            let out = commands::resolve_out_dir(out_dir, &cfg);
            commands::cmd_eval(&cfg, &artifact, &test, &out)
        }
        Command::Coreset { config, dataset, out_dir, seed } => {
            let cfg = config::load_config(&config)?;
            let out = commands::resolve_out_dir(out_dir, &cfg);
            commands::cmd_coreset(&cfg, &dataset, &out, seed)
        }
        Command::Analyze { config, dataset, store, artifact, out_dir, seed } => {
            let cfg = config::load_config(&config)?;
            let out = commands::resolve_out_dir(out_dir, &cfg);
            commands::cmd_analyze(
                &cfg,
                dataset.as_deref(),
                store.as_deref(),
                artifact.as_deref(),
                &out,
                seed,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
