//! Single-binary pipeline: synth, preprocess, pretrain, finetune, eval,
//! retrieve, report. Progress goes to stderr; machine-readable records go to
//! files under a run directory. Exit codes categorize failures:
//! 2 config, 3 data, 4 format, 5 training, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vox4d::error::Error;

mod commands;
mod common;

#[derive(Parser)]
#[command(name = "vox4d", version, about = "4D volumetric modeling pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Key-value config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, repeatable: --set key=value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; default <runs-root>/run-<timestamp>-s<seed>.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic 4D volumes and a manifest.
    Synth(CommonArgs),
    /// Resample, crop/pad, normalize; optional atlas connectivity.
    Preprocess(CommonArgs),
    /// Masked-autoencoder pretraining over a volume manifest.
    Pretrain(CommonArgs),
    /// Prompt tuning (or full fine-tuning) with scarcity/seed sweeps.
    Finetune(CommonArgs),
    /// Evaluate a prompt state against a labeled manifest.
    Eval(CommonArgs),
    /// Paired-encoder retrieval training and top-k evaluation.
    Retrieve(CommonArgs),
    /// Aggregate metric records from prior runs into a CSV summary.
    Report(CommonArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 2,
        "data" => 3,
        "format" => 4,
        "training" => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Synth(a) => commands::synth::run(a),
        Cmd::Preprocess(a) => commands::preprocess::run(a),
        Cmd::Pretrain(a) => commands::pretrain::run(a),
        Cmd::Finetune(a) => commands::finetune::run(a),
        Cmd::Eval(a) => commands::eval::run(a),
        Cmd::Retrieve(a) => commands::retrieve::run(a),
        Cmd::Report(a) => commands::report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
