//! `spnn` command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure or failed command, 2 usage
//! error, 3 numerical abort. Worker threads follow `RAYON_NUM_THREADS`.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spnn::nlbp::{PinvChoice, UpdateKind};

use error::CliError;

#[derive(Parser)]
#[command(name = "spnn", version, about = "Surjective pseudo-invertible networks, non-linear pseudo-inverses and guided restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic attribute dataset.
    GenData(GenDataArgs),
    /// Write an untrained model checkpoint.
    InitModel(InitModelArgs),
    /// Phase I: train the forward map (and r through the auxiliary losses).
    TrainForward(TrainForwardArgs),
    /// Phase II: train r toward the natural pseudo-inverse, forward frozen.
    TrainPinv(TrainPinvArgs),
    /// Train the diffusion denoiser.
    TrainDiffusion(TrainDiffusionArgs),
    /// Static-target guided sampling toward g(x) of dataset samples.
    Restore(RestoreArgs),
    /// Single-attribute editing with dynamic targets.
    Edit(EditArgs),
    /// Run verification suites against a checkpoint.
    Verify(VerifyArgs),
    /// Moore-Penrose pseudo-inverse of a matrix with its Penrose residuals.
    Pinv(PinvArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Natural,
    LearnedR,
    Constant,
    RandomR,
}

impl From<ModeArg> for PinvChoice {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Natural => PinvChoice::Natural,
            ModeArg::LearnedR => PinvChoice::LearnedR,
            ModeArg::Constant => PinvChoice::Constant,
            ModeArg::RandomR => PinvChoice::RandomR,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum UpdateArg {
    Gentle,
    Naive,
}

impl From<UpdateArg> for UpdateKind {
    fn from(u: UpdateArg) -> Self {
        match u {
            UpdateArg::Gentle => UpdateKind::Gentle,
            UpdateArg::Naive => UpdateKind::Naive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Suite {
    Penrose,
    Projection,
    Ablation,
    All,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML); missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Data spec (TOML); overrides `[data.spec]`.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitModelArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainForwardArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    /// Held-out set scored each epoch.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Continue from a phase I checkpoint, optimizer state included.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Append per-epoch records here.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_r: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainPinvArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Phase I checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Training inputs; targets are their images under g.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_r: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    w_natural: Option<f64>,
    #[arg(long)]
    w_r_surj: Option<f64>,
    #[arg(long)]
    w_r_stab: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainDiffusionArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GuidanceArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    denoiser: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    update: Option<UpdateArg>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Guidance applies at t <= this step.
    #[arg(long)]
    guidance_start: Option<usize>,
    #[arg(long)]
    travel_length: Option<usize>,
    #[arg(long)]
    travel_repeat: Option<usize>,
    #[arg(long, default_value_t = 556)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// One record per generated sample.
    #[arg(long)]
    out: PathBuf,
    /// Per-step trajectory records.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct RestoreArgs {
    #[command(flatten)]
    guidance: GuidanceArgs,
    /// Dataset holding the targets and their labels.
    #[arg(long)]
    data: PathBuf,
    /// Index of the first target; run i uses sample target + i.
    #[arg(long, default_value_t = 0)]
    target: usize,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    guidance: GuidanceArgs,
    /// Dataset whose logit statistics define the edit targets.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    attribute: usize,
    #[arg(long)]
    adaptive: bool,
    #[arg(long)]
    covariance_adjust: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_enum)]
    suite: Suite,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ablation inputs.
    #[arg(long)]
    denoiser: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    runs: usize,
    /// Required agreement gap between natural+gentle and every ablated cell.
    #[arg(long, default_value_t = 0.2)]
    min_margin: f64,
    /// Write the case records here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PinvArgs {
    /// Whitespace/comma separated rows, or the binary matrix record.
    #[arg(long)]
    matrix_file: PathBuf,
    #[arg(long)]
    rcond: Option<f64>,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Write A+ as a binary matrix record.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::InitModel(a) => commands::init_model(a),
        Command::TrainForward(a) => commands::train_forward(a),
        Command::TrainPinv(a) => commands::train_pinv(a),
        Command::TrainDiffusion(a) => commands::train_diffusion(a),
        Command::Restore(a) => commands::restore(a),
        Command::Edit(a) => commands::edit(a),
        Command::Verify(a) => commands::verify(a),
        Command::Pinv(a) => commands::pinv(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spnn: {e}");
            e.exit_code()
        }
    }
}
