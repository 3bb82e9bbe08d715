mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dfenet", version, about = "Train, evaluate and inspect dimension-fusion edge-guided lesion segmenters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic lesion dataset in the NIfTI subject layout.
    Synth(SynthArgs),
    /// Train one fold and keep its best checkpoint.
    Train(TrainArgs),
    /// K-fold cross-validation of one variant.
    Cv(CvArgs),
    /// Cross-validate all six ablation variants under one budget.
    Ablate(CvArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Segment one subject and write overlay PNGs.
    Predict(PredictArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Count trainable parameters.
    Params(ParamsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    subjects: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Volume size as Z,H,W.
    #[arg(long, default_value = "24,96,96")]
    size: String,
    #[arg(long)]
    noise: Option<f32>,
    #[arg(long)]
    contrast: Option<f32>,
}

/// Configuration sources shared by every command that trains or loads a model.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset root with one directory per subject.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    /// Encoder stage widths, e.g. 16,32,64,128.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `mean` or `sum` over batch and pixels.
    #[arg(long)]
    loss_reduction: Option<String>,
    /// Directory that receives the run directory.
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Mirror the event log on stderr.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    k: Option<usize>,
    /// Train folds on separate threads.
    #[arg(long)]
    parallel_folds: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Score only the test split of this fold instead of every subject.
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    subject: String,
    /// Defaults to `overlays/` inside the run directory.
    #[arg(long)]
    overlay_out: Option<PathBuf>,
    /// Write an overlay for every slice, not only those with lesion in the
    /// ground truth or the prediction.
    #[arg(long)]
    all_slices: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Block name, comma-separated names, or `all`.
    #[arg(long, default_value = "all")]
    block: String,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
}

#[derive(Args)]
struct ParamsArgs {
    /// Defaults to all six variants.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    context_depth: Option<usize>,
    /// Use the paper-scale stage widths 32,64,128,256,512.
    #[arg(long, conflicts_with = "channels")]
    paper_scale: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Cv(a) => commands::cv(a, false),
        Command::Ablate(a) => commands::cv(a, true),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Params(a) => commands::params(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
