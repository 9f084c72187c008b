//! `fewdoc` command-line tool: episode building, meta-training, evaluation
//! and analysis.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{AnalyzeArgs, BuildEpisodesArgs, DumpArgs, EvalArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "fewdoc", version, about = "Few-shot document-level relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample episodes from a corpus into a JSONL file.
    BuildEpisodes(BuildEpisodesArgs),
    /// Meta-train a model and write checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on an episode file.
    Eval(EvalArgs),
    /// Macro F1 per NOTA-rate bin and per support-count category.
    Analyze(AnalyzeArgs),
    /// Write support instance embeddings and prototypes as TSV.
    DumpEmbeddings(DumpArgs),
}

/// 2 config/input, 3 sampling exhaustion, 4 numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    use fewdoc::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Exhaustion { .. } => 3,
                Error::NonFinite(_) | Error::NonFiniteLoss { .. } => 4,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildEpisodes(args) => commands::build_episodes(&args),
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Analyze(args) => commands::analyze(&args),
        Command::DumpEmbeddings(args) => commands::dump_embeddings(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
