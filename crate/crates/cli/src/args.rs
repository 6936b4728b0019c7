use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "picat", version, about = "Illumination-invariant low-light enhancement toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write ratio descriptors, C_map heatmaps and raw tensor dumps.
    Transform(TransformArgs),
    /// Train a model on a paired dataset or synthetic pairs.
    Train(TrainArgs),
    /// Enhance images with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Score a checkpoint, optionally under a perturbation sweep.
    Eval(EvalArgs),
    /// Inject spatial or frequency-domain noise into images.
    Perturb(PerturbArgs),
    /// Finite-difference check of every parameter gradient.
    Gradcheck(GradcheckArgs),
    /// Summarize run manifests as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (manifest and artifacts).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Domain {
    Linear,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Spatial,
    Frequency,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Module {
    Cat,
    Dcaf,
    Cndn,
    Backbone,
    All,
}

/// Model flags shared by commands that build a model.
#[derive(Debug, Args)]
pub struct ModelFlags {
    /// baseline, cst, cst+dcaf, full or no-cst.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, value_enum)]
    pub domain: Option<Domain>,
    /// Decode sRGB with x^2.2 before taking ratios.
    #[arg(long)]
    pub linearize: bool,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[command(flatten)]
    pub common: Common,
    /// PNG file or directory of PNGs.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub domain: Option<Domain>,
    /// Kernel bank entry (gaussian, laplacian); repeat to build a bank.
    #[arg(long = "kernel")]
    pub kernels: Vec<String>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Density exponent k (ignored when a checkpoint provides it).
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub linearize: bool,
    /// Checkpoint supplying the density parameter and DCAF weights.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Dataset root with low/ and high/ subdirectories.
    #[arg(long, conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Train on this many synthetic pairs.
    #[arg(long)]
    pub synth: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Spatial noise sigma (0-255 scale) added to training inputs.
    #[arg(long)]
    pub train_noise: Option<f64>,
    /// Number of held-out synthetic validation pairs.
    #[arg(long)]
    pub val_count: Option<usize>,
    /// Exit with status 3 when a training check fails.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Model config JSON; defaults to model.json beside the checkpoint.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Score the inputs themselves instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub identity: bool,
    #[arg(long, conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub synth: Option<usize>,
    /// Comma-separated noise levels, e.g. 15,25,50.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub module: Option<Module>,
    /// Side of the random test image.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Manifest files or directories containing manifest.json.
    pub inputs: Vec<PathBuf>,
}
