//! Command-line driver: train models, generate attacks, run sweeps,
//! and emit reports, all from checkpoints and IDX archives on disk.
//!
//! Every run resolves its settings from an optional flat key=value
//! config file with flags taking precedence, then echoes the resolved
//! values to `resolved.cfg` in the output directory so the run can be
//! repeated without retyping anything.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Errors split by exit code: usage and config problems exit 2,
/// failures during an otherwise well-formed run exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

macro_rules! runtime_from {
    ($($ty:ty),+ $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> CliError {
                CliError::Runtime(e.to_string())
            }
        })+
    };
}

runtime_from!(
    std::io::Error,
    advlab::attacks::AttackError,
    advlab::data::DataError,
    advlab::eval::EvalError,
    advlab::nn::checkpoint::CheckpointError,
    advlab::nn::ModelError,
    advlab::train::TrainError,
);

#[derive(Parser)]
#[command(name = "advlab", version, about = "Adversarial robustness laboratory")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat key=value config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random choice in the run (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread cap for sweep evaluation (default 1).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory; created if missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Directory holding the mnist/ and fashion/ IDX archives.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    /// Classifier size: "full" (6M parameters) or "reduced" (desk
    /// scale, the default).
    #[arg(long, global = true)]
    profile: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier; writes classifier.ckpt and history.csv.
    TrainClassifier(TrainClassifierArgs),
    /// Train the denoising autoencoder against a classifier checkpoint;
    /// writes denoiser.ckpt and history.csv.
    TrainAutoencoder(TrainAutoencoderArgs),
    /// Attack a dataset split and persist the clean/adversarial pairs
    /// with their manifest.
    Attack(AttackArgs),
    /// Sweep attack strengths against a checkpoint and write the
    /// accuracy report CSV.
    Evaluate(EvaluateArgs),
    /// Merge report CSVs into fixed-width tables and per-curve point
    /// files.
    Report(ReportArgs),
    /// Dump clean/adversarial/reconstructed image triples as PGM files.
    Gallery(GalleryArgs),
}

#[derive(Args)]
struct TrainClassifierArgs {
    /// Source corpus: mnist or fashion.
    #[arg(long)]
    dataset: Option<String>,

    /// Stratified subset size drawn from the train split before the
    /// train/val split; omit to use the whole split.
    #[arg(long)]
    subset: Option<usize>,

    /// Minibatch size (default 64).
    #[arg(long)]
    batch_size: Option<usize>,

    /// Epoch cap (default 30).
    #[arg(long)]
    max_epochs: Option<usize>,

    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,

    /// Adam learning rate (default 1e-3).
    #[arg(long)]
    lr: Option<f64>,

    /// Minimum validation loss improvement that resets patience.
    #[arg(long)]
    min_delta: Option<f64>,
}

#[derive(Args)]
struct TrainAutoencoderArgs {
    /// Classifier checkpoint the mixture attacks are generated against.
    #[arg(long)]
    ckpt: Option<PathBuf>,

    /// Source corpus: mnist or fashion.
    #[arg(long)]
    dataset: Option<String>,

    /// Stratified subset size for the mixture; omit for the whole split.
    #[arg(long)]
    subset: Option<usize>,

    /// Attack families in the mixture: fgsm, pgd, or both.
    #[arg(long)]
    mixture: Option<String>,

    /// Fraction of images appended again as clean (x, x) pairs.
    #[arg(long)]
    clean_fraction: Option<f64>,

    /// FGSM strengths drawn per image, as start:stop:step or a comma
    /// list.
    #[arg(long)]
    fgsm_grid: Option<String>,

    /// PGD strengths drawn per image, same syntax.
    #[arg(long)]
    pgd_grid: Option<String>,

    /// PGD iteration count for the mixture (default 40).
    #[arg(long)]
    pgd_steps: Option<usize>,

    /// Minibatch size (default 64).
    #[arg(long)]
    batch_size: Option<usize>,

    /// Epoch cap (default 50).
    #[arg(long)]
    max_epochs: Option<usize>,

    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,

    /// Adam learning rate (default 1e-3).
    #[arg(long)]
    lr: Option<f64>,

    /// Minimum validation loss improvement that resets patience.
    #[arg(long)]
    min_delta: Option<f64>,
}

#[derive(Args)]
struct AttackArgs {
    /// Classifier checkpoint to attack.
    #[arg(long)]
    ckpt: Option<PathBuf>,

    /// Source corpus: mnist or fashion.
    #[arg(long)]
    dataset: Option<String>,

    /// Split to attack: train or test (default test).
    #[arg(long)]
    split: Option<String>,

    /// Stratified subset size; omit for the whole split.
    #[arg(long)]
    subset: Option<usize>,

    /// Attack family: fgsm or pgd.
    #[arg(long)]
    family: Option<String>,

    /// Perturbation budget in [0, 1] pixel units.
    #[arg(long, allow_negative_numbers = true)]
    eps: Option<f32>,

    /// PGD step size (default eps / 10).
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f32>,

    /// PGD iteration count (default 40).
    #[arg(long)]
    steps: Option<usize>,

    /// Start PGD from a random point in the eps ball (default true).
    #[arg(long)]
    random_start: Option<bool>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Classifier checkpoint to evaluate.
    #[arg(long)]
    ckpt: Option<PathBuf>,

    /// Denoising autoencoder checkpoint; adds the defended rows.
    #[arg(long)]
    defense: Option<PathBuf>,

    /// Source corpus: mnist or fashion.
    #[arg(long)]
    dataset: Option<String>,

    /// Split to evaluate: train or test (default test).
    #[arg(long)]
    split: Option<String>,

    /// Stratified subset size; omit for the whole split.
    #[arg(long)]
    subset: Option<usize>,

    /// Attack family: fgsm or pgd.
    #[arg(long)]
    family: Option<String>,

    /// Epsilon grid, as start:stop:step (inclusive) or a comma list.
    #[arg(long)]
    grid: Option<String>,

    /// PGD step size override.
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f32>,

    /// PGD iteration count override.
    #[arg(long)]
    steps: Option<usize>,

    /// PGD random start override.
    #[arg(long)]
    random_start: Option<bool>,

    /// Images per attack batch (default 128).
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report CSVs to merge, repeatable.
    #[arg(long = "in", num_args = 1..)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct GalleryArgs {
    /// Classifier checkpoint to attack.
    #[arg(long)]
    ckpt: Option<PathBuf>,

    /// Denoising autoencoder checkpoint; adds the reconstructed panel.
    #[arg(long)]
    defense: Option<PathBuf>,

    /// Source corpus: mnist or fashion.
    #[arg(long)]
    dataset: Option<String>,

    /// Split to sample: train or test (default test).
    #[arg(long)]
    split: Option<String>,

    /// Stratified subset to sample from; omit for the whole split.
    #[arg(long)]
    subset: Option<usize>,

    /// Attack family: fgsm (default) or pgd.
    #[arg(long)]
    family: Option<String>,

    /// Perturbation budget in [0, 1] pixel units.
    #[arg(long, allow_negative_numbers = true)]
    eps: Option<f32>,

    /// PGD step size (default eps / 10).
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f32>,

    /// PGD iteration count (default 40).
    #[arg(long)]
    steps: Option<usize>,

    /// PGD random start (default true).
    #[arg(long)]
    random_start: Option<bool>,

    /// Number of image triples to write (default 8).
    #[arg(long)]
    k: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("advlab: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
