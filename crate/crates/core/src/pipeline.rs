//! Synthetic end-to-end run: disparity -> depth -> simulated LiDAR ->
//! completion -> fusion -> decoding with time-aware queries -> tracking ->
//! PQ/VPQ.
//!
//! The scene is a 64x128 street: a building band on top, a road plane below
//! and a few cars and a pedestrian sliding sideways over four frames. Image
//! features come from an idealised "backbone" that embeds the ground-truth
//! labels, so the whole chain is deterministic and cheap. The decoder
//! weights are random, so prediction scores are only required to be finite;
//! the ground truth scored against itself must give PQ = VPQ = 1.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::decoder::{laq_loss, Decoder, DecoderConfig, QuerySet};
use crate::depth::{
    complete_depth, disparity_to_depth, simulate_sparse_lidar, CameraIntrinsics, CompletionConfig, DepthMap,
    LidarSimConfig,
};
use crate::error::Result;
use crate::formats::encode_disparity;
use crate::fusion::{multi_scale_fuse, FeatureMap, FusionMode, FusionParams};
use crate::metrics::{
    compute_pq, compute_vpq, Category, CategoryTable, PanopticMap, PqReport, SegmentInfo, VpqConfig, VpqReport, VOID,
};
use crate::rng::SeededRng;
use crate::tracking::{hungarian, CostMatrix, FrameTracks, MatchConfig, Tracker};

pub const ROAD: u32 = 1;
pub const BUILDING: u32 = 2;
pub const CAR: u32 = 3;
pub const PERSON: u32 = 4;

const CAMERA_HEIGHT: f64 = 1.5;
const BUILDING_DEPTH: f64 = 40.0;
const HORIZON_ROW: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    pub threads: usize,
    pub intrinsics: CameraIntrinsics,
    pub lidar: LidarSimConfig,
    pub completion: CompletionConfig,
    pub decoder: DecoderConfig,
    pub taq: bool,
    pub matching: MatchConfig,
    pub vpq: VpqConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            width: 128,
            height: 64,
            frames: 4,
            seed: 0,
            threads: 1,
            intrinsics: CameraIntrinsics {
                focal_x: Some(120.0),
                focal_y: 120.0,
                principal_x: Some(64.0),
                principal_y: 8.0,
                baseline: Some(0.21),
            },
            lidar: LidarSimConfig {
                beams: 32,
                ..LidarSimConfig::default()
            },
            completion: CompletionConfig::default(),
            decoder: DecoderConfig {
                num_classes: 4,
                ..DecoderConfig::default()
            },
            taq: true,
            matching: MatchConfig::default(),
            vpq: VpqConfig::default(),
        }
    }
}

/// A rectangular object moving horizontally.
#[derive(Debug, Clone, Copy)]
struct Mover {
    id: u32,
    category: u32,
    bottom: usize,
    height: usize,
    width: usize,
    x0: f64,
    velocity: f64,
}

/// Ground truth and sensor data of one synthetic frame.
#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    pub panoptic: PanopticMap,
    pub depth: DepthMap,
    /// Cityscapes-style 16-bit disparity samples.
    pub disparity: Vec<u16>,
}

fn road_depth(row: usize, intr: &CameraIntrinsics) -> f64 {
    intr.focal_y * CAMERA_HEIGHT / (row as f64 - intr.principal_y)
}

pub fn categories() -> CategoryTable {
    let cat = |id, name: &str, is_thing| Category {
        id,
        name: name.into(),
        is_thing,
    };
    CategoryTable::new([
        cat(ROAD, "road", false),
        cat(BUILDING, "building", false),
        cat(CAR, "car", true),
        cat(PERSON, "person", true),
    ])
    .expect("ids are distinct")
}

/// Builds the synthetic sequence. Requires `principal_y < 20` so the road
/// plane is in front of the camera.
pub fn synthetic_sequence(cfg: &DemoConfig) -> Result<Vec<SyntheticFrame>> {
    let (w, h) = (cfg.width, cfg.height);
    let intr = &cfg.intrinsics;
    intr.validate()?;
    if h <= HORIZON_ROW + 8 || w < 32 || intr.principal_y >= HORIZON_ROW as f64 {
        return Err(crate::Error::invalid(
            "demo config",
            "scene needs height > 28, width >= 32 and principal_y < 20",
        ));
    }
    let mut rng = SeededRng::new(cfg.seed ^ 0x5ce7e);
    let mut movers = Vec::new();
    for (k, id) in [10u32, 11, 12].into_iter().enumerate() {
        let bottom = HORIZON_ROW + 10 + k * (h - HORIZON_ROW - 10) / 3 + rng.below(4);
        let bottom = bottom.min(h);
        let height = 6 + 2 * k + rng.below(3);
        movers.push(Mover {
            id,
            category: CAR,
            bottom,
            height,
            width: 14 + 3 * k,
            x0: rng.uniform(0.0, (w - 20) as f64),
            velocity: rng.uniform(-6.0, 6.0),
        });
    }
    movers.push(Mover {
        id: 20,
        category: PERSON,
        bottom: h - 2,
        height: 14,
        width: 4,
        x0: rng.uniform(0.0, (w - 4) as f64),
        velocity: rng.uniform(-3.0, 3.0),
    });

    let segments = {
        let mut s = vec![
            SegmentInfo {
                id: 1,
                category_id: ROAD,
                is_thing: false,
            },
            SegmentInfo {
                id: 2,
                category_id: BUILDING,
                is_thing: false,
            },
        ];
        s.extend(movers.iter().map(|m| SegmentInfo {
            id: m.id,
            category_id: m.category,
            is_thing: true,
        }));
        s
    };
    let (fx, b) = (intr.focal_x.unwrap_or(intr.focal_y), intr.baseline.unwrap_or(0.21));
    let mut frames = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut ids = vec![VOID; w * h];
        let mut depth = vec![0.0; w * h];
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if r < 3 {
                    continue;
                }
                if r < HORIZON_ROW {
                    ids[i] = 2;
                    depth[i] = BUILDING_DEPTH;
                } else {
                    ids[i] = 1;
                    depth[i] = road_depth(r, intr);
                }
            }
        }
        // far movers first so nearer ones occlude them
        let mut order: Vec<&Mover> = movers.iter().collect();
        order.sort_by_key(|m| m.bottom);
        for m in order {
            let span = (w - m.width) as f64;
            let x = (m.x0 + m.velocity * t as f64).rem_euclid(2.0 * span);
            let x = if x > span { 2.0 * span - x } else { x }.round() as usize;
            let d = road_depth(m.bottom - 1, intr);
            for r in m.bottom.saturating_sub(m.height)..m.bottom {
                for c in x..x + m.width {
                    ids[r * w + c] = m.id;
                    depth[r * w + c] = d;
                }
            }
        }
        let disparity: Vec<u16> = depth
            .iter()
            .map(|&d| if d > 0.0 { encode_disparity(b * fx / d) } else { Ok(0) })
            .collect::<Result<_>>()?;
        frames.push(SyntheticFrame {
            panoptic: PanopticMap::new(w, h, ids, segments.clone())?,
            depth: DepthMap::new(w, h, depth)?,
            disparity,
        });
    }
    Ok(frames)
}

fn avg_pool(values: &[f64], w: usize, h: usize, stride: usize) -> Array2<f64> {
    let (oh, ow) = (h / stride, w / stride);
    let mut out = Array2::zeros((oh, ow));
    for r in 0..oh * stride {
        for c in 0..ow * stride {
            out[[r / stride, c / stride]] += values[r * w + c];
        }
    }
    out / (stride * stride) as f64
}

/// Label-embedding image features and inverse-depth features at strides
/// 4, 8, 16 and 32.
fn backbone(
    panoptic: &PanopticMap,
    depth: &DepthMap,
    channels: usize,
    seed: u64,
) -> (Vec<FeatureMap>, Vec<FeatureMap>) {
    let mut rng = SeededRng::new(seed);
    let mut codes: BTreeMap<u32, Array1<f64>> = BTreeMap::new();
    let code = |rng: &mut SeededRng| Array1::from_shape_simple_fn(channels, || rng.uniform(-1.0, 1.0));
    let category_codes: BTreeMap<u32, Array1<f64>> = (1..=4).map(|c| (c, code(&mut rng))).collect();
    for s in panoptic.segments() {
        codes.insert(s.id, &category_codes[&s.category_id] + &(code(&mut rng) * 0.5));
    }
    let depth_code = code(&mut rng);
    let (w, h) = (panoptic.width(), panoptic.height());
    let mut image = Vec::new();
    let mut depth_maps = Vec::new();
    for (l, stride) in [4usize, 8, 16, 32].into_iter().enumerate() {
        let (oh, ow) = (h / stride, w / stride);
        let mut fi = Array3::zeros((channels, oh, ow));
        for k in 0..channels {
            let plane: Vec<f64> = panoptic
                .ids()
                .iter()
                .map(|id| codes.get(id).map_or(0.0, |c| c[k]))
                .collect();
            fi.index_axis_mut(ndarray::Axis(0), k)
                .assign(&avg_pool(&plane, w, h, stride));
        }
        let inv: Vec<f64> = depth
            .values()
            .iter()
            .map(|&d| if d > 0.0 { 10.0 / d } else { 0.0 })
            .collect();
        let pooled = avg_pool(&inv, w, h, stride);
        let fd = Array3::from_shape_fn((channels, oh, ow), |(k, r, c)| depth_code[k] * pooled[[r, c]]);
        let scale = l as u8 + 1;
        image.push(FeatureMap::new(scale, fi).expect("finite"));
        depth_maps.push(FeatureMap::new(scale, fd).expect("finite"));
    }
    (image, depth_maps)
}

/// Rasterises decoded queries into a panoptic map at full resolution.
/// Each pixel goes to the non-empty query maximising
/// `max class probability * sigmoid(mask logit)`; the segment id is the
/// query's track id and the category its predicted class + 1.
pub fn queries_to_panoptic(
    q: &QuerySet,
    track_ids: &[Option<u64>],
    width: usize,
    height: usize,
) -> Result<PanopticMap> {
    let probs = q
        .class_probs()
        .ok_or_else(|| crate::Error::invalid("rasterise", "query set has no class logits"))?;
    let classes = q.predicted_classes().expect("class logits present");
    let masks = q
        .mask_logits
        .as_ref()
        .ok_or_else(|| crate::Error::invalid("rasterise", "query set has no mask logits"))?;
    let (_, mh, mw) = masks.dim();
    let mut segments = BTreeMap::new();
    let mut ids = vec![VOID; width * height];
    for r in 0..height {
        for c in 0..width {
            let (sy, sx) = ((r * mh / height).min(mh - 1), (c * mw / width).min(mw - 1));
            let mut best: Option<(f64, usize)> = None;
            for (i, id) in track_ids.iter().enumerate() {
                if id.is_none() {
                    continue;
                }
                let score = probs[[i, classes[i]]] * crate::fusion::sigmoid(masks[[i, sy, sx]]);
                if best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, i));
                }
            }
            if let Some((_, i)) = best {
                let id = u32::try_from(track_ids[i].expect("non-empty")).unwrap_or(u32::MAX);
                let category_id = classes[i] as u32 + 1;
                segments.insert(
                    id,
                    SegmentInfo {
                        id,
                        category_id,
                        is_thing: category_id >= CAR,
                    },
                );
                ids[r * width + c] = id;
            }
        }
    }
    PanopticMap::new(width, height, ids, segments.into_values().collect())
}

/// LAQ loss of the decoded centres against the segments the queries' masks
/// overlap best (Hungarian on `1 - IoU`).
fn laq_against_ground_truth(q: &QuerySet, gt: &PanopticMap, cfg: &DecoderConfig) -> Result<f64> {
    let masks = q.mask_logits.as_ref().expect("decoder output has masks");
    let centers = q.centers.as_ref().expect("decoder output has centres");
    let (n, mh, mw) = masks.dim();
    let (w, h) = (gt.width(), gt.height());
    let segs: Vec<&SegmentInfo> = gt.segments().collect();
    let mut inter = Array2::<f64>::zeros((n, segs.len()));
    let mut pred_area = vec![0.0; n];
    let mut gt_area = vec![0.0; segs.len()];
    let index: BTreeMap<u32, usize> = segs.iter().enumerate().map(|(j, s)| (s.id, j)).collect();
    for r in 0..h {
        for c in 0..w {
            let j = index.get(&gt.id_at(r, c)).copied();
            if let Some(j) = j {
                gt_area[j] += 1.0;
            }
            let (sy, sx) = ((r * mh / h).min(mh - 1), (c * mw / w).min(mw - 1));
            for i in 0..n {
                if masks[[i, sy, sx]] > 0.0 {
                    pred_area[i] += 1.0;
                    if let Some(j) = j {
                        inter[[i, j]] += 1.0;
                    }
                }
            }
        }
    }
    let cost = Array2::from_shape_fn((n, segs.len()), |(i, j)| {
        let union = pred_area[i] + gt_area[j] - inter[[i, j]];
        if union > 0.0 {
            1.0 - inter[[i, j]] / union
        } else {
            1.0
        }
    });
    let all_centers = gt.segment_centers();
    let mut target = Array2::zeros((n, 2));
    let mut is_thing = vec![false; n];
    for p in hungarian(&CostMatrix::new(cost)?) {
        let s = segs[p.cur];
        if let (true, Some(c)) = (s.is_thing, all_centers.get(&s.id)) {
            target[[p.prev, 0]] = c[0];
            target[[p.prev, 1]] = c[1];
            is_thing[p.prev] = true;
        }
    }
    Ok(laq_loss(centers, &target, &is_thing, &cfg.laq)?.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoFrameReport {
    pub frame: usize,
    pub dense_valid: usize,
    pub sparse_valid: usize,
    pub completed_range: Option<(f64, f64)>,
    pub non_empty_queries: usize,
    pub laq_loss: f64,
    pub tracks: FrameTracks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCheck {
    pub pq: Option<f64>,
    pub vpq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub version: String,
    pub config: DemoConfig,
    pub frames: Vec<DemoFrameReport>,
    pub pq: PqReport,
    pub vpq: VpqReport,
    pub self_check: SelfCheck,
}

impl DemoReport {
    /// Every reported metric is a finite number.
    pub fn all_finite(&self) -> bool {
        let pq_ok = |r: &PqReport| r.all.is_some_and(f64::is_finite);
        pq_ok(&self.pq)
            && self.vpq.mean.is_some_and(f64::is_finite)
            && self.frames.iter().all(|f| f.laq_loss.is_finite())
            && self.self_check.pq.is_some_and(f64::is_finite)
            && self.self_check.vpq.is_some_and(f64::is_finite)
    }
}

/// Everything the demo produced, for callers that want to write artifacts.
#[derive(Debug, Clone)]
pub struct DemoOutput {
    pub report: DemoReport,
    pub ground_truth: Vec<SyntheticFrame>,
    pub sparse: Vec<DepthMap>,
    pub completed: Vec<DepthMap>,
    pub queries: Vec<QuerySet>,
    pub predictions: Vec<PanopticMap>,
}

pub fn run_demo(cfg: &DemoConfig) -> Result<DemoOutput> {
    let frames = synthetic_sequence(cfg)?;
    let cats = categories();
    let channels = cfg.decoder.embed_dim;
    let decoder = Decoder::new(cfg.decoder)?;
    let fusion = FusionParams::initial(channels, channels, cfg.seed ^ 0xf05e);
    let modes = vec![FusionMode::DynamicWeighting(fusion); 4];

    let mut sparse_maps = Vec::new();
    let mut completed_maps = Vec::new();
    let mut pyramids = Vec::new();
    for (t, f) in frames.iter().enumerate() {
        let dense = disparity_to_depth(&f.disparity, cfg.width, cfg.height, &cfg.intrinsics)?;
        let lidar = LidarSimConfig {
            seed: cfg.lidar.seed ^ cfg.seed.wrapping_add(t as u64),
            ..cfg.lidar
        };
        let sparse = simulate_sparse_lidar(&dense, &cfg.intrinsics, &lidar)?;
        let completed = complete_depth(&sparse, &cfg.completion)?;
        let (image, depth) = backbone(&f.panoptic, &completed, channels, cfg.seed);
        pyramids.push(multi_scale_fuse(&image, &depth, &modes)?);
        log::debug!("frame {t}: {} sparse returns", sparse.valid_count());
        sparse_maps.push((dense.valid_count(), sparse));
        completed_maps.push(completed);
    }

    let decoded = decoder.decode_sequence(&pyramids, cfg.taq)?;
    let mut tracker = Tracker::new(cfg.matching)?;
    let mut frame_reports = Vec::new();
    let mut predictions = Vec::new();
    for (t, d) in decoded.iter().enumerate() {
        let (assignment, tracks) = tracker.step(&d.output)?;
        predictions.push(queries_to_panoptic(
            &d.output,
            &assignment.track_ids,
            cfg.width,
            cfg.height,
        )?);
        frame_reports.push(DemoFrameReport {
            frame: t,
            dense_valid: sparse_maps[t].0,
            sparse_valid: sparse_maps[t].1.valid_count(),
            completed_range: completed_maps[t].valid_range(),
            non_empty_queries: assignment.track_ids.iter().flatten().count(),
            laq_loss: laq_against_ground_truth(&d.output, &frames[t].panoptic, &cfg.decoder)?,
            tracks,
        });
    }

    let gts: Vec<PanopticMap> = frames.iter().map(|f| f.panoptic.clone()).collect();
    let (_, pq) = compute_pq(&predictions, &gts, &cats, cfg.threads)?;
    let vpq = compute_vpq(&predictions, &gts, &cats, &cfg.vpq, cfg.threads)?;
    let (_, self_pq) = compute_pq(&gts, &gts, &cats, cfg.threads)?;
    let self_vpq = compute_vpq(&gts, &gts, &cats, &cfg.vpq, cfg.threads)?;

    let report = DemoReport {
        version: crate::VERSION.to_string(),
        config: cfg.clone(),
        frames: frame_reports,
        pq,
        vpq,
        self_check: SelfCheck {
            pq: self_pq.all,
            vpq: self_vpq.mean,
        },
    };
    Ok(DemoOutput {
        report,
        ground_truth: frames,
        sparse: sparse_maps.into_iter().map(|(_, s)| s).collect(),
        completed: completed_maps,
        queries: decoded.into_iter().map(|d| d.output).collect(),
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_scene_is_consistent() {
        let frames = synthetic_sequence(&DemoConfig::default()).unwrap();
        assert_eq!(frames.len(), 4);
        for f in &frames {
            assert_eq!(f.panoptic.id_at(0, 0), VOID);
            assert_eq!(f.disparity[0], 0);
            assert!(f.panoptic.areas().contains_key(&20));
        }
    }

    #[test]
    fn demo_is_finite_and_self_consistent() {
        let out = run_demo(&DemoConfig::default()).unwrap();
        assert!(out.report.all_finite());
        assert_eq!(out.report.self_check.pq, Some(1.0));
        assert_eq!(out.report.self_check.vpq, Some(1.0));
        let again = run_demo(&DemoConfig::default()).unwrap();
        assert_eq!(out.report, again.report);
    }
}
