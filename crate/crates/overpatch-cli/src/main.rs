//! `overpatch`: command-line pipeline for physically parameterized patch
//! attacks against the desk-scale overhead-imagery classifier.
//!
//! Subcommands: `synth-data` (generate a dataset), `train` (fit the
//! classifier), `attack` (optimize patches over a manifest of sequence and
//! target pairs), `evaluate` (replay one patch over one scene), `report`
//! (aggregate results into CSV/JSON).
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error,
//! 3 numeric failure.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::run::CliError;

#[derive(Parser, Debug)]
#[command(name = "overpatch", version, about = "Adversarial patch attacks on overhead imagery")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// Experiment configuration JSON (sections: synth, model, train,
    /// attack, filter); missing sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed overriding every stage's configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `evaluate`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the attack fan-out.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overwrite non-empty output directories.
    #[arg(long, global = true, default_value_t = false)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic revisit-sequence dataset.
    SynthData,
    /// Train the classifier on a generated dataset.
    Train {
        /// Dataset directory (as written by synth-data).
        #[arg(long)]
        data: PathBuf,
    },
    /// Optimize patches over every (sequence, target) pair in the manifest.
    Attack {
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint path.
        #[arg(long)]
        model: PathBuf,
        /// Also dump per-frame composite PPMs next to each result.
        #[arg(long, default_value_t = false)]
        dump_composites: bool,
    },
    /// Re-evaluate a saved patch against one scene directory.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        patch: PathBuf,
        /// Scene directory (scene.json plus frames).
        #[arg(long)]
        scene: PathBuf,
        /// Targeted label; omit for non-targeted accounting.
        #[arg(long)]
        target: Option<usize>,
        /// Leading frames to flag as attacker-visible in the records.
        #[arg(long, default_value_t = 0)]
        frames_attacked: usize,
    },
    /// Aggregate attack results into CSV/JSON reports.
    Report {
        /// Directory holding result_*.json files from `attack`.
        #[arg(long)]
        results: PathBuf,
        /// Pool results whose attack configs differ.
        #[arg(long, default_value_t = false)]
        allow_mixed: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    let outcome = match cli.command {
        Command::SynthData => run::synth_data(&cli.global),
        Command::Train { ref data } => run::train(&cli.global, data),
        Command::Attack {
            ref data,
            ref model,
            dump_composites,
        } => run::attack(&cli.global, data, model, dump_composites),
        Command::Evaluate {
            ref model,
            ref patch,
            ref scene,
            target,
            frames_attacked,
        } => run::evaluate(&cli.global, model, patch, scene, target, frames_attacked),
        Command::Report {
            ref results,
            allow_mixed,
        } => run::report(&cli.global, results, allow_mixed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
