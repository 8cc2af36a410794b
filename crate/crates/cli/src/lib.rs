pub mod commands;
pub mod config;
pub mod error;
pub mod selftest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{RunConfig, TrainArgs};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "fusionseg", version, about = "Binary lesion segmentation: train, evaluate, predict")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints, history and a manifest to --out.
    Train(TrainArgs),
    /// Score a checkpoint on an image/mask set and write a per-image CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write 0/255 PNG masks for every image in a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Colour-coded comparison of predicted and reference masks.
    Overlay {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
    /// Write a synthetic lesion dataset.
    Synth {
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(args) => commands::train(args),
        Command::Eval {
            checkpoint,
            images,
            masks,
            out,
        } => commands::eval(checkpoint, images, masks, out),
        Command::Predict { checkpoint, images, out } => commands::predict_dir(checkpoint, images, out),
        Command::Overlay {
            pred,
            truth,
            images,
            out,
        } => commands::overlay(pred, truth, images, out),
        Command::Selftest => match selftest::run() {
            0 => Ok(()),
            n => Err(CliError::Runtime(fusionseg::Error::Data(format!("{n} self-checks failed")))),
        },
        Command::Synth { count, size, seed, out } => commands::synth(*count, *size, *seed, out),
    }
}
