use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lesionseg::volume::Contrast;

#[derive(Debug, Parser)]
#[command(name = "lesionseg", version, about = "Whole-brain and white-matter-lesion segmentation")]
pub struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic head with planted lesions and its ground truth.
    MakePhantom(MakePhantomArgs),
    /// Build a mesh atlas from training label maps and lesion masks.
    BuildAtlas(BuildAtlasArgs),
    /// Train the lesion shape model on binary masks.
    TrainShapePrior(TrainArgs),
    /// Segment a multi-contrast scan.
    Segment(SegmentArgs),
    /// Compare a predicted lesion mask with a reference.
    Evaluate(EvaluateArgs),
}

/// `PATH:TAG`, split at the last colon.
#[derive(Debug, Clone)]
pub struct TaggedInput {
    pub path: PathBuf,
    pub contrast: Contrast,
}

impl FromStr for TaggedInput {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (path, tag) = s.rsplit_once(':').ok_or_else(|| format!("expected PATH:TAG, got '{s}'"))?;
        if path.is_empty() {
            return Err(format!("empty path in '{s}'"));
        }
        let contrast = tag.parse::<Contrast>().map_err(|e| e.to_string())?;
        Ok(Self { path: path.into(), contrast })
    }
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    match v[..] {
        [n] => Ok([n; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(format!("expected N or X,Y,Z, got '{s}'")),
    }
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected MIN,MAX, got '{s}'"))?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?))
}

fn parse_affine(s: &str) -> Result<[f64; 16], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected 16 comma-separated values, got {}", v.len()))
}

#[derive(Debug, Args)]
pub struct MakePhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Grid size, `N` or `X,Y,Z`.
    #[arg(long, value_parser = parse_triple, default_value = "32")]
    pub dims: [usize; 3],
    /// Number of contrasts, taken in the order T1w, T2w, FLAIR.
    #[arg(long, default_value_t = 3)]
    pub contrasts: usize,
    #[arg(long, default_value_t = 5)]
    pub lesions: usize,
    #[arg(long, value_parser = parse_pair, default_value = "1.5,3.0")]
    pub lesion_radius: (f64, f64),
    /// Peak multiplicative bias in native intensity (0.2 = +-20%).
    #[arg(long, default_value_t = 0.0)]
    pub bias: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BuildAtlasArgs {
    /// Training label map (repeatable).
    #[arg(long = "labels", required = true)]
    pub labels: Vec<PathBuf>,
    /// Training lesion mask (repeatable).
    #[arg(long = "lesions")]
    pub lesions: Vec<PathBuf>,
    /// Mesh cells per axis, `N` or `X,Y,Z`.
    #[arg(long, value_parser = parse_triple, default_value = "6")]
    pub resolution: [usize; 3],
    /// Accepted for interface uniformity; atlas building draws no random numbers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training lesion mask (repeatable).
    #[arg(long = "mask", required = true)]
    pub masks: Vec<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub latent: usize,
    /// Encoder channels per stage, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub mc_samples: usize,
    /// Maximum augmentation rotation per axis in degrees; 0 disables.
    #[arg(long, default_value_t = 10.0)]
    pub rotation: f64,
    #[arg(long, default_value_t = 1)]
    pub augment_copies: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model file.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch training log CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Rule {
    All,
    Any,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Input volume with its contrast tag (T1w, T2w, FLAIR, PD, OTHER); repeatable.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<TaggedInput>,
    #[arg(long)]
    pub atlas: PathBuf,
    /// Lesion shape model; without it the shape term is fixed at 1.
    #[arg(long)]
    pub shape_prior: Option<PathBuf>,
    /// JSON class sharing map; defaults to one Gaussian per label.
    #[arg(long)]
    pub sharing: Option<PathBuf>,
    /// White-matter label (1-based) when no sharing map is given.
    #[arg(long, default_value_t = 4)]
    pub wm_label: usize,
    /// Gray-matter label (1-based) when no sharing map is given.
    #[arg(long, default_value_t = 3)]
    pub gm_label: usize,
    /// Lesion pseudo-voxel count at 1 mm^3.
    #[arg(long, default_value_t = 500.0)]
    pub nu: f64,
    #[arg(long, default_value_t = 50.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = 50)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "all")]
    pub rule: Rule,
    #[arg(long, default_value_t = 30)]
    pub max_iters: usize,
    #[arg(long, value_parser = parse_triple)]
    pub bias_order: Option<[usize; 3]>,
    /// Subject-to-shape-model world affine, 16 row-major values.
    #[arg(long, value_parser = parse_affine)]
    pub subject_to_prior: Option<[f64; 16]>,
    /// Floor applied before the log transform of native-intensity inputs.
    #[arg(long, default_value_t = 1e-4)]
    pub floor: f64,
    /// Also write the fit objective trace and the sampler chain as CSV.
    #[arg(long)]
    pub trace: bool,
    /// Also write the fitted appearance parameters.
    #[arg(long)]
    pub dump_params: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Label map whose per-label volumes go into the report.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
