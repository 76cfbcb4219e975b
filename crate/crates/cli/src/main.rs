//! `tga`: generate synthetic data, train, infer and evaluate.

mod commands;
mod error;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tga_core::grouping_head::MaskLoss;

#[derive(Parser, Debug)]
#[command(
    name = "tga",
    version,
    about = "Text grouping adapter: train and run a layout grouping head"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a grouping head and write a checkpoint.
    Train(TrainArgs),
    /// Group the instances of one scene.
    Infer(InferArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Synthetic data config (JSON); defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MaskLossArg {
    Dice,
    Bce,
    Both,
}

impl From<MaskLossArg> for MaskLoss {
    fn from(m: MaskLossArg) -> Self {
        match m {
            MaskLossArg::Dice => MaskLoss::Dice,
            MaskLossArg::Bce => MaskLoss::Bce,
            MaskLossArg::Both => MaskLoss::Both,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Run config (JSON with `model` and `train` sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: u32,
    /// Per-step loss log; defaults to `loss.csv` in the checkpoint directory.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Drop the group-mask loss.
    #[arg(long)]
    pub no_gmp: bool,
    /// Replace the fused embedding by a single-scale projection.
    #[arg(long)]
    pub no_pixel_embedding: bool,
    #[arg(long, value_enum)]
    pub mask_loss: Option<MaskLossArg>,
    /// Word-level two-stage model.
    #[arg(long, conflicts_with = "word")]
    pub cascade: bool,
    /// Word-level single-stage model.
    #[arg(long)]
    pub word: bool,
    #[arg(long)]
    pub dim: Option<usize>,
}

fn parse_threshold(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if t > 0.0 && t < 1.0 {
        Ok(t)
    } else {
        Err(format!("threshold must lie in (0, 1), got {t}"))
    }
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or manifest holding the scene.
    #[arg(long)]
    pub data: PathBuf,
    /// Scene id; defaults to the first scene of the dataset.
    #[arg(long)]
    pub scene: Option<String>,
    /// Grouping JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// SVG overlay of the instances colored by group.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long, value_parser = parse_threshold)]
    pub threshold: Option<f64>,
    /// Run config whose model must agree with the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report JSON; printed to stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
    pub split: SplitArg,
    #[arg(long, value_parser = parse_threshold)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: u32,
    /// Run config whose model must agree with the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
