use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vextract_core::dsc::{LossWeights, MatchMode, StepSchedule};
use vextract_core::Config;

#[derive(Debug, Parser, Serialize)]
#[command(name = "vextract", version, about = "Unified vector extraction: polygons, polylines and line segments")]
pub struct Cli {
    /// Worker threads for per-scene work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Generate synthetic scenes as a COCO-style JSON file.
    Gen(GenArgs),
    /// Render scenes to binary PGM rasters.
    Rasterize(RasterizeArgs),
    /// Run feature extraction, encoder and decoder on every scene.
    Infer(InferArgs),
    /// Pair predictions with ground truth and match key points.
    Match(MatchArgs),
    /// Like `match`, plus the shape losses of every matched pair.
    Loss(MatchArgs),
    /// Fit a point sequence to a ground-truth shape by gradient descent on the shape loss.
    Fit(FitArgs),
    /// Evaluate predictions against ground truth.
    Eval(EvalArgs),
    /// Write scenes as SVG or GeoJSON files.
    Export(ExportArgs),
    /// Run the built-in invariant suite and print a pass/fail table.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    /// Instance queries per image.
    #[arg(long = "n-instances", default_value_t = 50)]
    pub n_instances: usize,
    /// Points per decoded sequence.
    #[arg(long = "m-points", default_value_t = 40)]
    pub m_points: usize,
    /// Channel width.
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    /// Sampling points per query, split across pyramid levels.
    #[arg(long = "e-samples", default_value_t = 16)]
    pub e_samples: usize,
    /// Decoder layers.
    #[arg(long, default_value_t = 6)]
    pub layers: usize,
    /// Coarse queries kept before refinement; clamped to the token count with a warning.
    #[arg(long = "k-coarse", default_value_t = 900)]
    pub k_coarse: usize,
    /// Pyramid down-sampling factors.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    pub scales: Vec<usize>,
    /// Attention heads.
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    /// Key-point probability threshold for extraction.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Minimum class probability of an extracted instance.
    #[arg(long = "score-threshold", default_value_t = 0.3)]
    pub score_threshold: f64,
}

impl ModelArgs {
    pub fn config(&self) -> Config {
        Config {
            n_instances: self.n_instances,
            m_points: self.m_points,
            channels: self.channels,
            e_samples: self.e_samples,
            layers: self.layers,
            k_coarse: self.k_coarse,
            scales: self.scales.clone(),
            heads: self.heads,
            keypoint_threshold: self.tau,
            score_threshold: self.score_threshold,
            ..Config::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct LossArgs {
    /// Point distance factor of the matching cost.
    #[arg(long = "alpha-p", default_value_t = 1.0)]
    pub alpha_p: f64,
    /// Key-point probability factor of the matching cost.
    #[arg(long = "alpha-c", default_value_t = 1.0)]
    pub alpha_c: f64,
    /// Weight of the direction loss.
    #[arg(long = "alpha-dir", default_value_t = 1.0)]
    pub alpha_dir: f64,
    /// Weight of the key-point position loss.
    #[arg(long = "alpha-kp", default_value_t = 10.0)]
    pub alpha_kp: f64,
    /// Weight of the key-point classification loss.
    #[arg(long = "alpha-cls", default_value_t = 1.0)]
    pub alpha_cls: f64,
    /// Point matching: order-preserving (monotone) or any injective match (hungarian).
    #[arg(long, default_value = "monotone", value_parser = parse_mode)]
    pub mode: MatchMode,
}

impl LossArgs {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha_p: self.alpha_p,
            alpha_c: self.alpha_c,
            alpha_dir: self.alpha_dir,
            alpha_kp: self.alpha_kp,
            alpha_cls: self.alpha_cls,
        }
    }
}

fn parse_mode(s: &str) -> Result<MatchMode, String> {
    MatchMode::parse(s).ok_or_else(|| format!("expected monotone or hungarian, got {s}"))
}

fn parse_schedule(s: &str) -> Result<StepSchedule, String> {
    StepSchedule::parse(s).ok_or_else(|| format!("expected constant or linear-decay, got {s}"))
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of scenes.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long = "instances-min", default_value_t = 10)]
    pub instances_min: usize,
    #[arg(long = "instances-max", default_value_t = 10)]
    pub instances_max: usize,
    /// Probabilities of building, road boundary and center line.
    #[arg(long = "class-mix", value_delimiter = ',', default_value = "0.706,0.189,0.105")]
    pub class_mix: Vec<f64>,
    /// Raster side length in pixels.
    #[arg(long = "raster-size", default_value_t = 256)]
    pub raster_size: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RasterizeArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    /// Directory receiving `scene_<id>.pgm`.
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
    /// Stroke width of open structures and outlines, in pixels.
    #[arg(long, default_value_t = 1)]
    pub stroke: usize,
    /// Input coordinates are pixels rather than normalized.
    #[arg(long = "pixel-coords")]
    pub pixel_coords: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    /// Parameter file; without it weights are drawn from `--seed`.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Seed of the deterministic weight initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the feature stand-in.
    #[arg(long = "feature-seed", default_value_t = 0)]
    pub feature_seed: u64,
    /// Stroke width used when rasterizing the input scenes.
    #[arg(long, default_value_t = 1)]
    pub stroke: usize,
    #[arg(long = "pixel-coords")]
    pub pixel_coords: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct MatchArgs {
    /// Prediction file (a plain scene file is accepted too).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth scene file.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long = "pixel-coords")]
    pub pixel_coords: bool,
    /// Class factor of the instance pairing cost.
    #[arg(long = "lambda-cls", default_value_t = 2.0)]
    pub lambda_cls: f64,
    /// Point factor of the instance pairing cost.
    #[arg(long = "lambda-pts", default_value_t = 5.0)]
    pub lambda_pts: f64,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub loss: LossArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Scene file holding the target; a centred square when absent.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Image of the target instance; the first image when absent.
    #[arg(long = "image-id")]
    pub image_id: Option<u64>,
    /// Target instance id; the first instance of the image when absent.
    #[arg(long = "instance-id")]
    pub instance_id: Option<u64>,
    /// Points in the fitted sequence.
    #[arg(long = "m-points", default_value_t = 12)]
    pub m_points: usize,
    /// Noise std added to the uniform resampling of the target to get the start points.
    #[arg(long, default_value_t = 0.02)]
    pub jitter: f64,
    /// Starting key-point probability of every point.
    #[arg(long = "init-prob", default_value_t = 0.5)]
    pub init_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Initial step size.
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Step-size schedule: constant or linear-decay.
    #[arg(long, default_value = "linear-decay", value_parser = parse_schedule)]
    pub schedule: StepSchedule,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub loss: LossArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "describe")]
    pub pred: Option<PathBuf>,
    #[arg(long, required_unless_present = "describe")]
    pub gt: Option<PathBuf>,
    #[arg(long = "pixel-coords")]
    pub pixel_coords: bool,
    /// Pixel distance within which a rasterized pixel counts as correct.
    #[arg(long = "pixel-tolerance", default_value_t = 10.0)]
    pub pixel_tolerance: f64,
    /// Stroke width for the pixel metrics.
    #[arg(long, default_value_t = 1)]
    pub stroke: usize,
    /// Snap radius of the path-length similarity, in pixels.
    #[arg(long = "apls-snap", default_value_t = 10.0)]
    pub apls_snap: f64,
    /// Node pairs sampled per graph beyond which pairs are drawn at random.
    #[arg(long = "apls-pairs", default_value_t = 200)]
    pub apls_pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the report as CSV rows.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Print the definition of every metric and exit.
    #[arg(long)]
    pub describe: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    /// Scene or prediction file.
    #[arg(long)]
    pub scenes: PathBuf,
    /// svg or geojson.
    #[arg(long, default_value = "svg", value_parser = ["svg", "geojson"])]
    pub format: String,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
    #[arg(long = "pixel-coords")]
    pub pixel_coords: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print results as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}
