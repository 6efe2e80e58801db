use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mavlkit", version, about = "Class-agnostic detection toolkit")]
pub struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for per-image work; never changes the output.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// What to print on standard output.
    #[arg(long, global = true, value_enum, default_value_t = Format::Both)]
    pub format: Format,
    /// Also write the JSON report to this file.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
    Both,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// AP50, Recall@N, size buckets and per-category recall of detections.
    Eval(EvalArgs),
    /// Pool detections from several sources per image, then NMS and top-N.
    Combine(CombineArgs),
    /// Run a checkpoint on PGM images.
    Infer(InferArgs),
    /// Unknown-object pseudo-labels from proposals and known GT.
    Pseudolabel(PseudolabelArgs),
    /// Boxes of connected components in a PGM mask.
    Mask2box(Mask2boxArgs),
    /// Write a synthetic shapes dataset.
    GenSynth(GenSynthArgs),
    /// Apply a caption-structure ablation transform to a synthetic dataset.
    Ablate(AblateArgs),
    /// Generate or read data, train the toy detector, evaluate it.
    TrainToy(TrainToyArgs),
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Compare fast paths against brute-force references.
    Oracle(OracleArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ProtocolArgs {
    /// IoU needed for a true positive.
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Detections kept per image.
    #[arg(long, default_value_t = 50)]
    pub top_n: usize,
    /// Drop detections scoring at or below this.
    #[arg(long)]
    pub score_thresh: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub dets: PathBuf,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    /// Use 11-point interpolated AP.
    #[arg(long)]
    pub eleven_point: bool,
    /// Average recall over images instead of pooling matches.
    #[arg(long)]
    pub per_image_recall: bool,
    /// Recall@N cut-offs.
    #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
    pub recall_at: Vec<usize>,
    /// Area fraction below which an object is small.
    #[arg(long, default_value_t = 0.05)]
    pub small: f64,
    /// Area fraction above which an object is large.
    #[arg(long, default_value_t = 0.20)]
    pub large: f64,
}

#[derive(Args, Debug)]
pub struct CombineArgs {
    /// Detection files, one per source.
    #[arg(long, num_args = 1.., required = true)]
    pub sources: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub nms: f64,
    #[arg(long, default_value_t = 50)]
    pub top_n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PGM images; image ids are their 1-based positions in this list.
    #[arg(long, num_args = 1.., required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long, default_value = "all objects")]
    pub query: String,
    /// Split every image into this many equal tiles.
    #[arg(long)]
    pub tiles: Option<usize>,
    /// NMS threshold when pooling tiles.
    #[arg(long, default_value_t = 0.5)]
    pub nms: f64,
    #[arg(long, default_value_t = 50)]
    pub top_n: usize,
    #[arg(long)]
    pub score_thresh: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PseudolabelArgs {
    #[arg(long)]
    pub proposals: PathBuf,
    #[arg(long)]
    pub known_gt: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub min_score: f64,
    #[arg(long, default_value_t = 0.5)]
    pub max_known_iou: f64,
    /// NMS among surviving pseudo-labels.
    #[arg(long)]
    pub nms: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Mask2boxArgs {
    #[arg(long)]
    pub mask: PathBuf,
    /// Pixels at or above this gray level are foreground.
    #[arg(long, default_value_t = 128)]
    pub threshold: u8,
    /// 4 or 8.
    #[arg(long, default_value_t = 8)]
    pub connectivity: u32,
    #[arg(long, default_value_t = 1)]
    pub min_area: usize,
    #[arg(long, default_value_t = 1)]
    pub image_id: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub images: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub min_shapes: usize,
    #[arg(long, default_value_t = 4)]
    pub max_shapes: usize,
    #[arg(long, default_value_t = 0.25)]
    pub noise: f64,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Directory written by gen-synth.
    #[arg(long)]
    pub data: PathBuf,
    /// 1 merge, 2 merge + NMS, 3 merge + NMS + random regrouping.
    #[arg(long)]
    pub setting: u32,
    #[arg(long, default_value_t = 6)]
    pub group_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub nms: f64,
    /// Output file for the transformed groups.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainToyArgs {
    /// JSON experiment config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train on a directory written by gen-synth instead of generating.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Images to generate (training plus held out).
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub train_images: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Ablation setting 1 to 5 (5 keeps the query groups).
    #[arg(long)]
    pub setting: Option<u32>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub fusion_blocks: Option<usize>,
    /// Save the trained parameters here.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 200)]
    pub hungarian: usize,
    #[arg(long, default_value_t = 500)]
    pub nms: usize,
    #[arg(long, default_value_t = 100)]
    pub ap: usize,
    #[arg(long, default_value_t = 200)]
    pub components: usize,
    #[arg(long, default_value_t = 20)]
    pub msda: usize,
}
