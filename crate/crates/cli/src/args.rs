//! Command-line grammar.

use std::path::PathBuf;

use bioatt_core::experiment::ExperimentName;
use bioatt_core::network::Variant;
use bioatt_core::train::Weighting;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "bioatt",
    version,
    about = "Prior-guided attention denoising for low-dose CT",
    after_help = "Exit status: 0 success, 1 usage error, 2 I/O or format error, 3 invariant violation.\n\
                  BIOATT_THREADS caps worker threads (default: all cores)."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write paired synthetic phantoms (<id>_ld.ctv, <id>_nd.ctv).
    GenPhantom(GenPhantomArgs),
    /// Train one model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on every image pair in a directory.
    Eval(EvalArgs),
    /// Denoise a single CTV image.
    Denoise(DenoiseArgs),
    /// Export the attention maps of a bioatt checkpoint as PGM files.
    AttentionMaps(AttentionMapsArgs),
    /// Run an ablation experiment over one shared split.
    Experiment(ExperimentArgs),
    /// Write a prior file without a vision-language model.
    PriorsStub(PriorsStubArgs),
}

#[derive(Debug, Args)]
pub struct GenPhantomArgs {
    #[arg(long)]
    pub count: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 512)]
    pub dims: usize,
    /// Noise standard deviation in standardized units.
    #[arg(long, default_value_t = 0.06)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "ph")]
    pub prefix: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// How bioatt obtains priors when a command needs them.
#[derive(Debug, Clone, Args)]
pub struct PriorArgs {
    /// Prior file keyed by image id.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Descriptor list, one name per line (default: the built-in 17).
    #[arg(long)]
    pub descriptors: Option<PathBuf>,
    /// Rescale prior vectors that do not sum to one instead of rejecting them.
    #[arg(long)]
    pub renormalize: bool,
}

/// Settings that override the `--config` file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML file with [model], [train] and [split] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds model init, training order and the split.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    pub weighting: Option<WeightingArg>,
    #[command(flatten)]
    pub priors: PriorArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Train on full images with batch size 1.
    #[arg(long)]
    pub whole_image: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub priors: PriorArgs,
    /// Prior weighting for bioatt checkpoints.
    #[arg(long, value_enum, default_value = "clip-file")]
    pub weighting: WeightingArg,
    /// Seed of the random weighting.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub whole_image: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub priors: PriorArgs,
    #[arg(long, value_enum, default_value = "clip-file")]
    pub weighting: WeightingArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub whole_image: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttentionMapsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[command(flatten)]
    pub priors: PriorArgs,
    #[arg(long, value_enum, default_value = "clip-file")]
    pub weighting: WeightingArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Subdirectory name for this export, e.g. `epoch10`.
    #[arg(long)]
    pub epoch_tag: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long, value_enum)]
    pub name: ExperimentArg,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub priors: PriorArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct PriorsStubArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: StubMode,
    #[arg(long)]
    pub descriptors: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StubMode {
    /// 1/N for every descriptor.
    Uniform,
    /// Normalized uniform draws, seeded per image.
    Random,
    /// Deterministic scores from the image's HU histogram.
    Fixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Base,
    Channel,
    Spatial,
    Bioatt,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Base => Variant::Base,
            VariantArg::Channel => Variant::Channel,
            VariantArg::Spatial => Variant::Spatial,
            VariantArg::Bioatt => Variant::BioAtt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    ClipFile,
    Uniform,
    Random,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::ClipFile => Weighting::ClipFile,
            WeightingArg::Uniform => Weighting::Uniform,
            WeightingArg::Random => Weighting::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentArg {
    Attention,
    Patching,
    Weighting,
}

impl From<ExperimentArg> for ExperimentName {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::Attention => ExperimentName::Attention,
            ExperimentArg::Patching => ExperimentName::Patching,
            ExperimentArg::Weighting => ExperimentName::Weighting,
        }
    }
}
