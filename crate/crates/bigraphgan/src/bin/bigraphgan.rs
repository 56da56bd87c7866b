//! Command-line harness. All logic lives in `bigraphgan::cli`; this binary
//! parses arguments and maps errors to the documented exit codes
//! (0 ok, 2 usage, 3 I/O, 4 numeric failure, 5 config mismatch).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bigraphgan::cli;

#[derive(Parser)]
#[command(
    name = "bigraphgan",
    version,
    about = "Bipartite graph reasoning GAN for pose-guided image synthesis"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic pose-transfer corpus.
    GenerateData(cli::GenerateArgs),
    /// Train from a TOML run configuration.
    Train {
        /// Path to the run configuration file.
        config: PathBuf,
    },
    /// Evaluate a checkpoint (or a baseline) on a corpus split.
    Eval(cli::EvalArgs),
    /// Run one source image to a target pose and dump the outputs.
    Infer(cli::InferArgs),
    /// Train and score the B1..B6 ablation ladder.
    Ablate(cli::AblateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenerateData(args) => cli::cmd_generate_data(args),
        Cmd::Train { config } => cli::cmd_train(config),
        Cmd::Eval(args) => cli::cmd_eval(args),
        Cmd::Infer(args) => cli::cmd_infer(args),
        Cmd::Ablate(args) => cli::cmd_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code(&err) as u8)
        }
    }
}
