//! `pvkit`: depth preparation, fusion, decoding, tracking and panoptic
//! evaluation from the command line.
//!
//! Exit codes: 0 success, 1 invalid input or flags, 2 filesystem failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "pvkit", version, about = "Depth-aware video panoptic segmentation toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for metric evaluation.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, env = "PVKIT_LOG", default_value = "warn")]
    pub log_level: log::LevelFilter,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Depth map utilities.
    #[command(subcommand)]
    Depth(DepthCommand),
    /// Fuse an image and a depth feature map.
    Fuse(FuseArgs),
    /// Run the toy query decoder over a sequence of feature pyramids.
    Decode(DecodeArgs),
    /// Associate decoded queries across frames.
    Track(TrackArgs),
    /// Panoptic metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// End-to-end run on a bundled synthetic sequence.
    Demo(DemoArgs),
}

#[derive(Debug, Subcommand)]
pub enum DepthCommand {
    /// Sample a dense depth map into simulated LiDAR returns.
    Simulate(SimulateArgs),
    /// Densify sparse depth with morphological completion.
    Complete(CompleteArgs),
    /// Convert a 16-bit disparity PNG into metric depth.
    FromDisparity(FromDisparityArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputEncoding {
    /// value / 256 meters.
    Depth256,
    /// Cityscapes disparity, (value - 1) / 256 pixels.
    Disparity,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Dense depth PNG.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = InputEncoding::Depth256)]
    pub input_encoding: InputEncoding,
    /// Camera intrinsics JSON.
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// Sparse depth PNG to write (value / 256 meters).
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub beams: usize,
    /// Probability that a return survives ray-drop.
    #[arg(long, default_value_t = 0.7)]
    pub keep: f64,
    #[arg(long, default_value_t = -24.8, allow_hyphen_values = true)]
    pub fov_min: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    pub fov_max: f64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CompleteArgs {
    /// Sparse depth PNG (value / 256 meters).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Optional 8-bit visualisation of the completed map.
    #[arg(long)]
    pub preview: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    pub max_depth: f64,
    #[arg(long)]
    pub no_blur: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FromDisparityArgs {
    /// 16-bit disparity PNG.
    #[arg(long)]
    pub input: PathBuf,
    /// Intrinsics JSON with focal_x and baseline.
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub preview: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FuseMode {
    /// Gated depth residual.
    Dynamic,
    /// Plain elementwise sum.
    Sum,
}

#[derive(Debug, Args, Serialize)]
pub struct FuseArgs {
    /// Image features, PVT1 tensor [C, H, W].
    #[arg(long)]
    pub image: PathBuf,
    /// Depth features, PVT1 tensor [C, H, W].
    #[arg(long)]
    pub depth: PathBuf,
    /// Gate parameters JSON; seeded initial values when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FuseMode::Dynamic)]
    pub mode: FuseMode,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    /// One frame's feature levels as comma separated PVT1 tensors [C, H, W].
    /// Repeat once per frame, in order.
    #[arg(long = "frame", required = true)]
    pub frames: Vec<String>,
    /// Reuse the previous frame's non-empty queries.
    #[arg(long)]
    pub taq: bool,
    #[arg(long, default_value_t = 8)]
    pub queries: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Disable self-attention between queries.
    #[arg(long)]
    pub no_self_attention: bool,
    /// Directory receiving one query sidecar per frame.
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeArg {
    AllSlots,
    NonEmptyOnly,
}

#[derive(Debug, Args, Serialize)]
pub struct TrackArgs {
    /// Query sidecars in frame order.
    #[arg(long = "queries", required = true, num_args = 1..)]
    pub queries: Vec<PathBuf>,
    /// Weight of the centre-distance term.
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = ScopeArg::AllSlots)]
    pub scope: ScopeArg,
    /// Path of tracks.json.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Panoptic quality over matched frame pairs.
    Pq(PqArgs),
    /// Video panoptic quality over temporal windows.
    Vpq(VpqArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct PanopticDirs {
    /// Directory of predicted `<stem>.png` + `<stem>.json` pairs.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth pairs with the same stems.
    #[arg(long)]
    pub gt: PathBuf,
    /// Category table JSON; inferred from both directories when omitted.
    #[arg(long)]
    pub categories: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PqArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub dirs: PanopticDirs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AveragingArg {
    WindowThenClass,
    Pooled,
}

#[derive(Debug, Args, Serialize)]
pub struct VpqArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub dirs: PanopticDirs,
    /// Temporal distances in raw frames.
    #[arg(long, value_delimiter = ',', default_value = "0,5,10,15")]
    pub ks: Vec<u32>,
    /// Raw frames between consecutive annotated frames.
    #[arg(long, default_value_t = 5)]
    pub stride: u32,
    #[arg(long, value_enum, default_value_t = AveragingArg::WindowThenClass)]
    pub averaging: AveragingArg,
}

#[derive(Debug, Args, Serialize)]
pub struct DemoArgs {
    /// Directory for the report and PNG artifacts; report to stdout only when omitted.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    /// Decode every frame from the learned queries.
    #[arg(long)]
    pub no_taq: bool,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.global.log_level)
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
