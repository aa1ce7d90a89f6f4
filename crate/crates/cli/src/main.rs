//! Command-line driver: synthetic-corpus generation, echo-profile
//! processing, model training, evaluation protocols, and report merging.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data/format error,
//! 4 leakage or split-assertion failure.

mod commands;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "echoid", version, about = "Ultrasonic face-scan authentication pipeline")]
struct Cli {
    /// Run single-threaded. Outputs are bit-identical either way; this only
    /// constrains scheduling.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of recordings plus its manifest.
    Synth(commands::SynthArgs),
    /// Convert recordings into echo-profile tensors.
    Process(commands::ProcessArgs),
    /// Pretrain the multi-class base model on the pretraining users.
    Pretrain(commands::PretrainArgs),
    /// Enroll one user: binary model from the pretrained extractor.
    Enroll(commands::EnrollArgs),
    /// Run an evaluation protocol and write a report.
    Eval(commands::EvalArgs),
    /// Fine-tune an enrolled model on 15 seconds of a given day.
    Finetune(commands::FinetuneArgs),
    /// Merge report JSON files into one CSV.
    Report(commands::ReportArgs),
    /// Export a transmit sweep as raw f32 samples plus a JSON sidecar.
    ExportChirp(commands::ExportChirpArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        // Ignore failure: the pool may already be initialized in tests.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let result = match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Process(args) => commands::process(args),
        Command::Pretrain(args) => commands::pretrain(args),
        Command::Enroll(args) => commands::enroll(args),
        Command::Eval(args) => commands::eval(args),
        Command::Finetune(args) => commands::finetune(args),
        Command::Report(args) => commands::report(args),
        Command::ExportChirp(args) => commands::export_chirp(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
