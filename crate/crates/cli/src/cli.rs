use std::path::PathBuf;

use abdnet::datagen::Category;
use abdnet::pointcloud::Rotation;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug, Serialize)]
#[command(name = "abdnet", version, about = "Decompose point clouds into planes, spheres, cylinders and cones")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Global {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads for data-parallel stages (falls back to ABDNET_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    /// Flat key=value file of flag defaults; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(untagged)]
pub enum Command {
    /// Generate a labeled synthetic dataset.
    GenData(GenData),
    /// Train the decomposition network.
    TrainDecomposer(TrainDecomposer),
    /// Train an object classifier on a frozen decomposer backbone.
    TrainClassifier(TrainClassifier),
    /// Label every point of a cloud and optionally export attention maps.
    Decompose(Decompose),
    /// Evaluate a decomposer or classifier checkpoint on a dataset.
    Eval(Eval),
    /// Robustness ablations.
    #[command(subcommand)]
    Ablate(Ablate),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainDecomposer(_) => "train-decomposer",
            Command::TrainClassifier(_) => "train-classifier",
            Command::Decompose(_) => "decompose",
            Command::Eval(_) => "eval",
            Command::Ablate(Ablate::DensityK(_)) => "ablate density-k",
            Command::Ablate(Ablate::Noise(_)) => "ablate noise",
        }
    }
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(untagged)]
pub enum Ablate {
    /// Accuracy over a grid of point densities and neighborhood sizes.
    DensityK(DensityK),
    /// Accuracy under Gaussian point jitter.
    Noise(Noise),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    pub fn on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small model sized for one CPU.
    Desk,
    /// Full-width model.
    Reference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Pose {
    /// As built, upright along z.
    None,
    /// Random turn about the z axis.
    Vertical,
    /// Uniformly random orientation.
    Full,
}

impl From<Pose> for Rotation {
    fn from(p: Pose) -> Rotation {
        match p {
            Pose::None => Rotation::None,
            Pose::Vertical => Rotation::Vertical,
            Pose::Full => Rotation::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenData {
    /// Total objects; `--test-fraction` of them go to the test split.
    #[arg(long, default_value_t = 500)]
    pub objects: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 512)]
    pub points: usize,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "box,capped-cylinder,bolt-like,sphere-on-plane,cone-frustum-stack,washer"
    )]
    pub categories: Vec<Category>,
    /// Objects with a larger share of plane points are redrawn; 1 disables the filter.
    #[arg(long, default_value_t = 0.9)]
    pub max_planar_fraction: f64,
    /// Random pose of each object.
    #[arg(long, value_enum, default_value_t = Pose::Vertical)]
    pub pose: Pose,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainOpts {
    #[arg(long)]
    pub data: PathBuf,
    /// Best-validation checkpoint; the resumable final state goes to `<out>.last`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub normals: Toggle,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    #[arg(long, default_value_t = 20)]
    pub decay_period: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Per-epoch curves CSV (default `<out>.curves.csv`).
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// A `.last` checkpoint to continue from; its best checkpoint sits beside it without the suffix.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainDecomposer {
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Neighbors per point (default derived from the point density).
    #[arg(long)]
    pub k: Option<usize>,
    /// Random rotation applied to each training cloud.
    #[arg(long, value_enum, default_value_t = Pose::Vertical)]
    pub rotation: Pose,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainClassifier {
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    /// Trained decomposer checkpoint; its weights stay frozen.
    #[arg(long)]
    pub backbone: PathBuf,
    /// Point dropout probability.
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    /// Widths of the four classifier stages.
    #[arg(long, value_delimiter = ',')]
    pub stages: Option<Vec<usize>>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Decompose {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Labeled output cloud; PLY output is colored by label.
    #[arg(long)]
    pub out: PathBuf,
    /// Center and scale the cloud into the unit sphere first.
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    pub normalize: Toggle,
    /// Query point whose attention is exported.
    #[arg(long, requires = "attention_out")]
    pub attention_query: Option<usize>,
    #[arg(long, requires = "attention_query")]
    pub attention_out: Option<PathBuf>,
    /// Encoder to export (default the last).
    #[arg(long)]
    pub attention_encoder: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub top: usize,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Eval {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Required for classifier checkpoints.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct AblateOpts {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Use only the first N objects of the split.
    #[arg(long, default_value_t = 20)]
    pub max_objects: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct DensityK {
    #[command(flatten)]
    #[serde(flatten)]
    pub opts: AblateOpts,
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
    pub densities: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub ks: Vec<usize>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Noise {
    #[command(flatten)]
    #[serde(flatten)]
    pub opts: AblateOpts,
    #[arg(long, value_delimiter = ',', default_value = "0,0.02,0.03,0.04,0.05")]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub draws: usize,
}
