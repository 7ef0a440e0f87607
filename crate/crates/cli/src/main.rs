//! `auattn`: train, evaluate and probe the attention-pooled AU detector.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 for anything that
//! goes wrong while running (including a failed gradient check).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use auattn::dataio::Policy;

#[derive(Debug, Parser)]
#[command(name = "auattn", version, about = "Facial action unit detection with attention pooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model, writing checkpoint.bin and log.csv into --out. If --out
    /// already holds a checkpoint, training resumes from it.
    Train(TrainArgs),
    /// Print per-AU and macro F1 of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print per-AU probabilities and decisions for one image.
    Predict(PredictArgs),
    /// Write a synthetic dataset of labelled rectangle patterns.
    Synth(SynthArgs),
    /// Check every analytic gradient against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Random points per check.
    #[arg(long, default_value_t = 100)]
    points: usize,
    /// Seed for the check points.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset root holding annotations/ and images/.
    #[arg(long)]
    data: PathBuf,
    /// Train until this many epochs have completed.
    #[arg(long)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Learning rate for the first five epochs; a tenth of it afterwards.
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record the run as deterministic. Kernels are reproducible at any
    /// thread count, so this does not slow training down.
    #[arg(long)]
    deterministic: bool,
    /// Frames with some unknown (-1) labels: keep and mask them, or drop them.
    #[arg(long, default_value = "mask", value_parser = parse_policy)]
    policy: Policy,
    /// One digit per conv block: 1 to follow it with 2x2 max-pooling.
    #[arg(long, default_value = "111100")]
    pool_schedule: String,
    /// Keep the momentum-averaged batch-norm statistics instead of
    /// recomputing them over the training set after every epoch.
    #[arg(long)]
    no_bn_refresh: bool,
    /// Output directory for the checkpoint and the epoch log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also print per-AU confusion counts.
    #[arg(long)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 112)]
    size: usize,
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse().map_err(|e: auattn::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    auattn::exec::configure_from_env();

    let result = match cli.command {
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Predict(args) => commands::predict(args),
        Command::Synth(args) => commands::synth(args),
        Command::Gradcheck(args) => commands::gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
