//! `atli`: calibrate, score and evaluate out-of-distribution detectors from
//! dumped logits, or run the synthetic benchmark end to end.

mod commands;
mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub const EXIT_CONTRACT: u8 = 2;
pub const EXIT_DATA: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "atli",
    version,
    about = "Adaptive top-k logit integration for OOD detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit standardization, signs and the rank set from train and pseudo-OOD logits.
    Calibrate(commands::CalibrateArgs),
    /// Score a logit file with one method.
    Score(commands::ScoreArgs),
    /// AUROC / FPR95 of ID scores against one or more OOD score files.
    Eval(commands::EvalArgs),
    /// Per-rank separability table of two logit files.
    TopkAnalysis(commands::TopkArgs),
    /// Generate pseudo-OOD logits from training features and a linear head.
    PseudoGen(commands::PseudoGenArgs),
    /// Run the synthetic Gaussian-mixture benchmark.
    BenchSynthetic(commands::BenchArgs),
}

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn contract(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONTRACT,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Failure::data(format!("{}: {err}", path.display()))
    }
}

impl From<atli_core::Error> for Failure {
    fn from(err: atli_core::Error) -> Self {
        if err.is_data_error() {
            Failure::data(err.to_string())
        } else {
            Failure::contract(err.to_string())
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, Failure> {
    match cli.command {
        Command::Calibrate(args) => commands::calibrate(&args),
        Command::Score(args) => commands::score(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::TopkAnalysis(args) => commands::topk_analysis(&args),
        Command::PseudoGen(args) => commands::pseudo_gen(&args),
        Command::BenchSynthetic(args) => commands::bench_synthetic(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(written) => {
            for path in written {
                eprintln!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code)
        }
    }
}
