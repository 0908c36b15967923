mod commands;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Multi-rater segmentation with per-rater Gaussian latents.
#[derive(Debug, Parser)]
#[command(name = "pionono", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-rater dataset (train and test splits).
    GenData(GenDataArgs),
    /// Train a model and rater bank on a dataset split.
    Train(TrainArgs),
    /// Predict gold segmentations with uncertainty maps.
    Predict(PredictArgs),
    /// Sample segmentations in the style of one rater (or a blend of two).
    Simulate(SimulateArgs),
    /// Fuse rater masks with majority vote or STAPLE.
    Fuse(FuseArgs),
    /// Agreement metrics of predicted masks against reference masks.
    Eval(EvalArgs),
    /// Print rater posteriors and their pairwise distances.
    InspectLatent(InspectArgs),
    /// Agreement tables, latent summaries and overlays for a test split.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output directory; receives train/, test/ and manifest.txt.
    #[arg(long)]
    out: PathBuf,
    /// Settings file (`key = value`; a previous manifest.txt works). Flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training images.
    #[arg(long)]
    train: Option<usize>,
    /// Test images.
    #[arg(long)]
    test: Option<usize>,
    /// Image side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Number of classes including background.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    max_shapes: Option<usize>,
    /// Standard deviation of the pixel noise.
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Probability that an (image, rater) mask is kept.
    #[arg(long)]
    coverage: Option<f64>,
    /// Comma-separated rater archetypes, e.g. `faithful,confuser:2:3:0.8,under:0.5`.
    #[arg(long)]
    raters: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset split directory (images/, raters/, gold/, meta.txt).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for log.csv, checkpoints and run.txt.
    #[arg(long)]
    out: PathBuf,
    /// Training config file (`key = value`). Flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_net: Option<f64>,
    #[arg(long)]
    lr_latent: Option<f64>,
    #[arg(long)]
    decay_start_epoch: Option<usize>,
    #[arg(long)]
    decay_factor: Option<f64>,
    /// KL weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Latent samples per annotation and step.
    #[arg(long)]
    k_train: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `images` (all annotations of each image per step) or `pairs`.
    #[arg(long)]
    batching: Option<String>,
    /// `dice` or `cross_entropy`.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    prior_var: Option<f64>,
    #[arg(long)]
    post_var: Option<f64>,
    /// `batch` or `all`.
    #[arg(long)]
    kl_scope: Option<String>,
    /// Intermediate checkpoint every N epochs (0 = final only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Random flips and quarter turns (`true`/`false`).
    #[arg(long)]
    augment: Option<bool>,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct SamplingArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset split directory; every image in images/ is processed.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    data: Option<PathBuf>,
    /// A single PPM image.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Latent samples per image.
    #[arg(long, default_value_t = pionono::inference::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the argmax of every sample.
    #[arg(long)]
    save_samples: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    sampling: SamplingArgs,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Rater index (the gold slot is allowed and flagged).
    #[arg(long)]
    rater: usize,
    /// Second rater; the output is the equal mixture of both.
    #[arg(long)]
    blend_with: Option<usize>,
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// Dataset split directory.
    #[arg(long)]
    data: PathBuf,
    /// `staple` or `majority`.
    #[arg(long, default_value = "staple")]
    method: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = pionono::fusion::DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = pionono::fusion::DEFAULT_TOL)]
    tol: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of predicted `<id>.pgm` masks; repeat for several sources.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Dataset split directory (every rater and gold become references) or
    /// a plain directory of `<id>.pgm` masks.
    #[arg(long)]
    reference: PathBuf,
    /// Number of classes; read from the dataset when omitted.
    #[arg(long)]
    classes: Option<usize>,
    /// `pooled` or `per-image`.
    #[arg(long, default_value = "pooled")]
    aggregation: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test split directory with rater masks.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = pionono::inference::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add the gold prediction against the dataset's gold masks.
    #[arg(long)]
    gold: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] pionono::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use pionono::Error as E;
        match self {
            CliError::Usage(_) | CliError::Lib(E::Config(_)) => 1,
            CliError::Lib(e) if e.is_numerical() => 3,
            CliError::Lib(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a, &argv),
        Command::Train(a) => commands::train(a, &argv),
        Command::Predict(a) => commands::predict(a.sampling, None, &argv),
        Command::Simulate(a) => commands::predict(a.sampling, Some((a.rater, a.blend_with)), &argv),
        Command::Fuse(a) => commands::fuse(a, &argv),
        Command::Eval(a) => commands::eval(a, &argv),
        Command::InspectLatent(a) => commands::inspect_latent(a, &argv),
        Command::Report(a) => report::run(a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
