use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gcr_cli::{exit_code, run, Command, Invocation};

/// Few-shot learning with global class representations.
#[derive(Parser)]
#[command(name = "gcr", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Train the feature extractor as a base-class classifier.
    Pretrain(Common),
    /// Episodic training; resumes from a training checkpoint.
    Train(Common),
    /// Standard and generalized evaluation of a trained checkpoint.
    Eval(Common),
    /// Train and evaluate every configured ablation variant.
    Ablate(Common),
    /// Add new classes to a trained model.
    Extend(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (default: `output_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Sub::Pretrain(a) => (Command::Pretrain, a),
        Sub::Train(a) => (Command::Train, a),
        Sub::Eval(a) => (Command::Eval, a),
        Sub::Ablate(a) => (Command::Ablate, a),
        Sub::Extend(a) => (Command::Extend, a),
    };
    let inv = Invocation { command, config: args.config, checkpoint: args.checkpoint, out: args.out };
    match run(&inv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
