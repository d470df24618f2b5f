use std::fmt;
use std::path::{Path, PathBuf};

use pvkit_core::decoder::{Decoder, DecoderConfig};
use pvkit_core::depth::{
    beam_rows, complete_depth, disparity_to_depth, simulate_sparse_lidar, CompletionConfig, DepthMap, LidarSimConfig,
};
use pvkit_core::formats::{
    depth_preview_png, feature_map_from_tensor, feature_map_to_tensor, fusion_params_from_json_bytes, read_bytes,
    read_depth_png, read_disparity_values, read_intrinsics, read_panoptic_png, read_query_set, read_tensor,
    write_bytes, write_depth_png, write_panoptic_png, write_query_set, write_tensor, DepthPngMode,
};
use pvkit_core::fusion::{fuse, FeatureMap, FusionMode, FusionParams, FusionParamsDoc};
use pvkit_core::metrics::{compute_pq, compute_vpq, Category, CategoryTable, PanopticMap, VpqAveraging, VpqConfig};
use pvkit_core::pipeline::{run_demo, DemoConfig};
use pvkit_core::tracking::{FrameTracks, MatchConfig, MatchScope, Tracker};
use pvkit_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::{
    AveragingArg, Cli, Command, CompleteArgs, DecodeArgs, DemoArgs, DepthCommand, EvalCommand, FromDisparityArgs,
    FuseArgs, FuseMode, InputEncoding, PanopticDirs, ScopeArg, SimulateArgs, TrackArgs,
};

/// A failure with the flag or file it concerns.
#[derive(Debug)]
pub struct CliError {
    context: String,
    kind: Kind,
}

#[derive(Debug)]
enum Kind {
    Core(Error),
    Usage(String),
}

impl CliError {
    fn usage(context: impl Into<String>, msg: impl Into<String>) -> Self {
        CliError {
            context: context.into(),
            kind: Kind::Usage(msg.into()),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match &self.kind {
            Kind::Core(e) if e.is_io() => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            Kind::Core(e) => write!(f, "{}: {e}", self.context),
            Kind::Usage(m) => write!(f, "{}: {m}", self.context),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

trait Context<T> {
    fn at(self, context: impl fmt::Display) -> CliResult<T>;
}

impl<T> Context<T> for pvkit_core::Result<T> {
    fn at(self, context: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| CliError {
            context: context.to_string(),
            kind: Kind::Core(e),
        })
    }
}

fn flag_file(flag: &str, path: &Path) -> String {
    format!("{flag} {}", path.display())
}

#[derive(Serialize)]
struct Global {
    seed: u64,
    threads: u32,
    log_level: String,
}

#[derive(Serialize)]
struct Report<'a, C: Serialize, R: Serialize> {
    version: &'static str,
    command: &'static str,
    global: &'a Global,
    config: C,
    result: R,
}

/// Writes pretty JSON to `path`, or stdout when `None`.
fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from).at("report")?;
    text.push('\n');
    match path {
        Some(p) => write_bytes(p, text.as_bytes()).at(flag_file("--report", p)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let g = Global {
        seed: cli.global.seed,
        threads: cli.global.threads,
        log_level: cli.global.log_level.to_string().to_lowercase(),
    };
    match &cli.command {
        Command::Depth(DepthCommand::Simulate(a)) => simulate(&g, a),
        Command::Depth(DepthCommand::Complete(a)) => complete(&g, a),
        Command::Depth(DepthCommand::FromDisparity(a)) => from_disparity(&g, a),
        Command::Fuse(a) => fuse_cmd(&g, a),
        Command::Decode(a) => decode(&g, a),
        Command::Track(a) => track(&g, a),
        Command::Eval(EvalCommand::Pq(a)) => eval_pq(&g, &a.dirs),
        Command::Eval(EvalCommand::Vpq(a)) => {
            let cfg = VpqConfig {
                k_labels: a.ks.clone(),
                sampling_stride: a.stride,
                averaging: match a.averaging {
                    AveragingArg::WindowThenClass => VpqAveraging::WindowThenClass,
                    AveragingArg::Pooled => VpqAveraging::Pooled,
                },
            };
            eval_vpq(&g, &a.dirs, cfg)
        }
        Command::Demo(a) => demo(&g, a),
    }
}

#[derive(Serialize)]
struct DepthSummary {
    width: usize,
    height: usize,
    valid: usize,
    range: Option<(f64, f64)>,
}

impl From<&DepthMap> for DepthSummary {
    fn from(m: &DepthMap) -> Self {
        DepthSummary {
            width: m.width(),
            height: m.height(),
            valid: m.valid_count(),
            range: m.valid_range(),
        }
    }
}

fn write_preview(path: Option<&PathBuf>, map: &DepthMap) -> CliResult<()> {
    if let Some(p) = path {
        let png = depth_preview_png(map).at("--preview")?;
        write_bytes(p, &png).at(flag_file("--preview", p))?;
    }
    Ok(())
}

fn simulate(g: &Global, a: &SimulateArgs) -> CliResult<()> {
    let intr = read_intrinsics(&a.intrinsics).at(flag_file("--intrinsics", &a.intrinsics))?;
    let dense = match a.input_encoding {
        InputEncoding::Depth256 => read_depth_png(&a.input, DepthPngMode::Depth256, None),
        InputEncoding::Disparity => read_depth_png(&a.input, DepthPngMode::CityscapesDisparity, Some(&intr)),
    }
    .at(flag_file("--input", &a.input))?;
    let cfg = LidarSimConfig {
        beams: a.beams,
        vertical_fov_deg: (a.fov_min, a.fov_max),
        keep_ratio: a.keep,
        seed: g.seed,
    };
    cfg.validate(dense.height()).at("--beams/--keep/--fov-min/--fov-max")?;
    let rows = beam_rows(dense.height(), &intr, &cfg).at("--intrinsics")?;
    let sparse = simulate_sparse_lidar(&dense, &intr, &cfg).at("depth simulate")?;
    write_depth_png(&a.output, &sparse, DepthPngMode::Depth256, None).at(flag_file("--output", &a.output))?;

    #[derive(Serialize)]
    struct Out {
        dense: DepthSummary,
        sparse: DepthSummary,
        beam_rows: Vec<usize>,
    }
    let report = Report {
        version: pvkit_core::VERSION,
        command: "depth simulate",
        global: g,
        config: json!({ "args": a, "lidar": cfg, "intrinsics": intr }),
        result: Out {
            dense: (&dense).into(),
            sparse: (&sparse).into(),
            beam_rows: rows,
        },
    };
    emit(&report, a.report.as_deref())
}

fn complete(g: &Global, a: &CompleteArgs) -> CliResult<()> {
    let sparse = read_depth_png(&a.input, DepthPngMode::Depth256, None).at(flag_file("--input", &a.input))?;
    let cfg = CompletionConfig {
        max_depth: a.max_depth,
        enable_blur: !a.no_blur,
        ..CompletionConfig::default()
    };
    cfg.validate().at("--max-depth")?;
    let dense = complete_depth(&sparse, &cfg).at(flag_file("--input", &a.input))?;
    write_depth_png(&a.output, &dense, DepthPngMode::Depth256, None).at(flag_file("--output", &a.output))?;
    write_preview(a.preview.as_ref(), &dense)?;
    let report = Report {
        version: pvkit_core::VERSION,
        command: "depth complete",
        global: g,
        config: json!({ "args": a, "completion": cfg }),
        result: [DepthSummary::from(&sparse), DepthSummary::from(&dense)],
    };
    emit(&report, a.report.as_deref())
}

fn from_disparity(g: &Global, a: &FromDisparityArgs) -> CliResult<()> {
    let intr = read_intrinsics(&a.intrinsics).at(flag_file("--intrinsics", &a.intrinsics))?;
    let raw = read_disparity_values(&a.input).at(flag_file("--input", &a.input))?;
    let depth = disparity_to_depth(&raw.values, raw.width, raw.height, &intr).at(flag_file("--input", &a.input))?;
    write_depth_png(&a.output, &depth, DepthPngMode::Depth256, None).at(flag_file("--output", &a.output))?;
    write_preview(a.preview.as_ref(), &depth)?;
    let report = Report {
        version: pvkit_core::VERSION,
        command: "depth from-disparity",
        global: g,
        config: json!({ "args": a, "intrinsics": intr }),
        result: DepthSummary::from(&depth),
    };
    emit(&report, a.report.as_deref())
}

fn load_features(path: &Path, scale: u8, flag: &str) -> CliResult<(FeatureMap, pvkit_core::formats::Dtype)> {
    let t = read_tensor(path).at(flag_file(flag, path))?;
    let f = feature_map_from_tensor(&t, scale).at(flag_file(flag, path))?;
    Ok((f, t.dtype()))
}

fn fuse_cmd(g: &Global, a: &FuseArgs) -> CliResult<()> {
    let (image, dtype) = load_features(&a.image, 1, "--image")?;
    let (depth, _) = load_features(&a.depth, 1, "--depth")?;
    let params = match &a.params {
        Some(p) => Some(
            read_bytes(p)
                .and_then(|b| fusion_params_from_json_bytes(&b))
                .at(flag_file("--params", p))?,
        ),
        None if a.mode == FuseMode::Dynamic => Some(FusionParams::initial(image.channels(), depth.channels(), g.seed)),
        None => None,
    };
    let mode = match (a.mode, &params) {
        (FuseMode::Dynamic, Some(p)) => FusionMode::DynamicWeighting(p.clone()),
        _ => FusionMode::Sum,
    };
    let out = fuse(&image, &depth, &mode).at("--image/--depth")?;
    let tensor = feature_map_to_tensor(&out, dtype).at("fuse output")?;
    write_tensor(&tensor, &a.output).at(flag_file("--output", &a.output))?;

    #[derive(Serialize)]
    struct Out {
        channels: usize,
        height: usize,
        width: usize,
    }
    let report = Report {
        version: pvkit_core::VERSION,
        command: "fuse",
        global: g,
        config: json!({ "args": a, "params": params.as_ref().map(FusionParamsDoc::from) }),
        result: Out {
            channels: out.channels(),
            height: out.height(),
            width: out.width(),
        },
    };
    emit(&report, a.report.as_deref())
}

fn decode(g: &Global, a: &DecodeArgs) -> CliResult<()> {
    let mut frames = Vec::with_capacity(a.frames.len());
    for spec in &a.frames {
        let mut levels = Vec::new();
        for (i, part) in spec.split(',').filter(|s| !s.is_empty()).enumerate() {
            let scale = u8::try_from(i + 1).map_err(|_| CliError::usage("--frame", "too many levels"))?;
            levels.push(load_features(Path::new(part), scale, "--frame")?.0);
        }
        if levels.is_empty() {
            return Err(CliError::usage("--frame", format!("no tensors in {spec:?}")));
        }
        frames.push(levels);
    }
    let cfg = DecoderConfig {
        layers: a.layers,
        num_queries: a.queries,
        embed_dim: frames[0][0].channels(),
        num_classes: a.classes,
        self_attention: !a.no_self_attention,
        seed: g.seed,
        ..DecoderConfig::default()
    };
    let decoder = Decoder::new(cfg).at("--layers/--queries/--classes")?;
    let decoded = decoder.decode_sequence(&frames, a.taq).at("--frame")?;
    std::fs::create_dir_all(&a.output_dir)
        .map_err(|e| Error::io(&a.output_dir, e))
        .at("--output-dir")?;

    #[derive(Serialize)]
    struct FrameOut {
        frame: usize,
        sidecar: PathBuf,
        non_empty: usize,
    }
    let mut out = Vec::new();
    for (t, d) in decoded.iter().enumerate() {
        let sidecar = write_query_set(&d.output, &a.output_dir, &format!("frame_{t:04}"))
            .at(flag_file("--output-dir", &a.output_dir))?;
        let non_empty = d
            .output
            .non_empty_flags()
            .map_or(0, |f| f.iter().filter(|x| **x).count());
        out.push(FrameOut {
            frame: t,
            sidecar,
            non_empty,
        });
    }
    let report = Report {
        version: pvkit_core::VERSION,
        command: "decode",
        global: g,
        config: json!({ "args": a, "decoder": cfg }),
        result: out,
    };
    emit(&report, a.report.as_deref())
}

fn track(g: &Global, a: &TrackArgs) -> CliResult<()> {
    let cfg = MatchConfig {
        alpha_position: a.alpha,
        match_scope: match a.scope {
            ScopeArg::AllSlots => MatchScope::AllSlots,
            ScopeArg::NonEmptyOnly => MatchScope::NonEmptyOnly,
        },
    };
    let mut tracker = Tracker::new(cfg).at("--alpha")?;
    let mut frames: Vec<FrameTracks> = Vec::new();
    for path in &a.queries {
        let q = read_query_set(path).at(flag_file("--queries", path))?;
        let (_, tracks) = tracker.step(&q).at(flag_file("--queries", path))?;
        frames.push(tracks);
    }
    let report = Report {
        version: pvkit_core::VERSION,
        command: "track",
        global: g,
        config: json!({ "args": a, "matching": cfg }),
        result: frames,
    };
    emit(&report, Some(&a.output))
}

/// `<stem>.png` files of a directory with their `<stem>.json` sidecars,
/// sorted by stem.
fn read_panoptic_dir(dir: &Path, flag: &str) -> CliResult<Vec<(String, PanopticMap)>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))
        .at(flag_file(flag, dir))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e)).at(flag_file(flag, dir))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::usage(flag_file(flag, dir), "no PNG files found"));
    }
    stems
        .into_iter()
        .map(|stem| {
            let png = dir.join(format!("{stem}.png"));
            let json = dir.join(format!("{stem}.json"));
            let map = read_panoptic_png(&png, &json).at(flag_file(flag, &png))?;
            Ok((stem, map))
        })
        .collect()
}

struct Loaded {
    preds: Vec<PanopticMap>,
    gts: Vec<PanopticMap>,
    cats: CategoryTable,
    stems: Vec<String>,
}

fn load_pairs(d: &PanopticDirs) -> CliResult<Loaded> {
    let preds = read_panoptic_dir(&d.pred, "--pred")?;
    let gts = read_panoptic_dir(&d.gt, "--gt")?;
    let pred_stems: Vec<&String> = preds.iter().map(|(s, _)| s).collect();
    let gt_stems: Vec<&String> = gts.iter().map(|(s, _)| s).collect();
    if pred_stems != gt_stems {
        return Err(CliError::usage(
            "--pred/--gt",
            format!("frame names differ: {pred_stems:?} vs {gt_stems:?}"),
        ));
    }
    let stems = gts.iter().map(|(s, _)| s.clone()).collect();
    let preds: Vec<PanopticMap> = preds.into_iter().map(|(_, m)| m).collect();
    let gts: Vec<PanopticMap> = gts.into_iter().map(|(_, m)| m).collect();
    let cats = match &d.categories {
        Some(p) => {
            let bytes = read_bytes(p).at(flag_file("--categories", p))?;
            let list: Vec<Category> = serde_json::from_slice(&bytes)
                .map_err(Error::from)
                .at(flag_file("--categories", p))?;
            CategoryTable::new(list).at(flag_file("--categories", p))?
        }
        None => CategoryTable::infer(gts.iter().chain(&preds)).at("--pred/--gt")?,
    };
    Ok(Loaded {
        preds,
        gts,
        cats,
        stems,
    })
}

fn eval_pq(g: &Global, d: &PanopticDirs) -> CliResult<()> {
    let l = load_pairs(d)?;
    let (_, pq) = compute_pq(&l.preds, &l.gts, &l.cats, g.threads as usize).at("eval pq")?;

    #[derive(Serialize)]
    struct Out {
        frames: Vec<String>,
        pq: pvkit_core::metrics::PqReport,
    }
    let report = Report {
        version: pvkit_core::VERSION,
        command: "eval pq",
        global: g,
        config: json!({ "args": d, "categories": l.cats.iter().collect::<Vec<_>>() }),
        result: Out { frames: l.stems, pq },
    };
    emit(&report, d.report.as_deref())
}

fn eval_vpq(g: &Global, d: &PanopticDirs, cfg: VpqConfig) -> CliResult<()> {
    cfg.validate().at("--ks/--stride")?;
    let l = load_pairs(d)?;
    let vpq = compute_vpq(&l.preds, &l.gts, &l.cats, &cfg, g.threads as usize).at("eval vpq")?;

    #[derive(Serialize)]
    struct Out {
        frames: Vec<String>,
        vpq: pvkit_core::metrics::VpqReport,
    }
    let report = Report {
        version: pvkit_core::VERSION,
        command: "eval vpq",
        global: g,
        config: json!({ "args": d, "vpq": cfg, "categories": l.cats.iter().collect::<Vec<_>>() }),
        result: Out { frames: l.stems, vpq },
    };
    emit(&report, d.report.as_deref())
}

fn demo(g: &Global, a: &DemoArgs) -> CliResult<()> {
    let base = DemoConfig::default();
    let cfg = DemoConfig {
        frames: a.frames,
        seed: g.seed,
        threads: g.threads as usize,
        taq: !a.no_taq,
        matching: MatchConfig {
            alpha_position: a.alpha,
            ..base.matching
        },
        ..base
    };
    let out = run_demo(&cfg).at("demo")?;
    if let Some(dir) = &a.output_dir {
        let at = |p: &Path| flag_file("--output-dir", p);
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(dir, e))
            .at(at(dir))?;
        for (t, f) in out.ground_truth.iter().enumerate() {
            let name = |kind: &str, ext: &str| dir.join(format!("{kind}_{t:04}.{ext}"));
            write_panoptic_png(&f.panoptic, name("gt", "png"), name("gt", "json")).at(at(dir))?;
            write_panoptic_png(&out.predictions[t], name("pred", "png"), name("pred", "json")).at(at(dir))?;
            write_depth_png(name("sparse", "png"), &out.sparse[t], DepthPngMode::Depth256, None).at(at(dir))?;
            write_depth_png(
                name("completed", "png"),
                &out.completed[t],
                DepthPngMode::Depth256,
                None,
            )
            .at(at(dir))?;
            let preview = depth_preview_png(&out.completed[t]).at(at(dir))?;
            write_bytes(name("completed_preview", "png"), &preview).at(at(dir))?;
        }
    }
    let report = Report {
        version: pvkit_core::VERSION,
        command: "demo",
        global: g,
        config: a,
        result: &out.report,
    };
    let path = a.output_dir.as_ref().map(|d| d.join("report.json"));
    emit(&report, path.as_deref())?;
    if !out.report.all_finite() {
        return Err(CliError::usage("demo", "report contains non-finite metrics"));
    }
    Ok(())
}
