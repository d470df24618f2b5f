//! Depth maps: disparity conversion, LiDAR simulation and ray-drop.
//!
//! A [`DepthMap`] stores metric depth on the image grid. The value `0.0`
//! marks a pixel without a measurement; every other value is finite and
//! strictly positive.

pub mod completion;

pub use completion::{complete_depth, complete_depth_staged, CompletionConfig, CompletionStages, Kernel, StageGrid};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Sentinel for "no measurement".
pub const INVALID: f64 = 0.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    /// Builds a map from row-major values, checking the validity invariant.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(
                "depth map",
                format!("dimensions must be positive, got {width}x{height}"),
            ));
        }
        if values.len() != width * height {
            return Err(Error::shape("depth map values", width * height, values.len()));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(
                "depth map",
                format!("pixel {i} has value {v}; depths must be finite and non-negative"),
            ));
        }
        Ok(DepthMap { width, height, values })
    }

    /// An all-invalid map.
    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![INVALID; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.get(row, col) > 0.0
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.width..(row + 1) * self.width]
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    /// Smallest and largest valid depth, if any pixel is valid.
    pub fn valid_range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .copied()
            .filter(|v| *v > 0.0)
            .fold(None, |acc, v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    /// Index of the topmost row holding at least one valid pixel.
    pub fn top_valid_row(&self) -> Option<usize> {
        (0..self.height).find(|&r| self.row(r).iter().any(|v| *v > 0.0))
    }

    /// Rows that hold at least one valid pixel, top to bottom.
    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.height)
            .filter(|&r| self.row(r).iter().any(|v| *v > 0.0))
            .collect()
    }
}

/// Pinhole intrinsics plus the stereo baseline.
///
/// Only the vertical terms are needed for LiDAR simulation; disparity
/// conversion additionally needs `focal_x` and `baseline`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal_x: Option<f64>,
    pub focal_y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal_x: Option<f64>,
    pub principal_y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<f64>,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(
                    "intrinsics",
                    format!("{name} must be finite and > 0, got {v}"),
                ))
            }
        };
        positive("focal_y", self.focal_y)?;
        if let Some(fx) = self.focal_x {
            positive("focal_x", fx)?;
        }
        if let Some(b) = self.baseline {
            positive("baseline", b)?;
        }
        if !self.principal_y.is_finite() || self.principal_x.is_some_and(|c| !c.is_finite()) {
            return Err(Error::invalid("intrinsics", "principal point must be finite"));
        }
        Ok(())
    }

    /// Vertical angle of an image row in radians, positive above the optical axis.
    pub fn row_angle(&self, row: usize) -> f64 {
        ((self.principal_y - row as f64) / self.focal_y).atan()
    }
}

/// Decodes a Cityscapes-convention disparity value (`(p - 1) / 256`, `p = 0`
/// invalid). Returns `None` for invalid pixels, including `p = 1` which
/// decodes to zero disparity.
pub fn decode_disparity(p: u16) -> Option<f64> {
    if p == 0 {
        return None;
    }
    let d = (p as f64 - 1.0) / 256.0;
    (d > 0.0).then_some(d)
}

/// Converts 16-bit Cityscapes disparity values to metric depth via
/// `depth = baseline * focal_x / disparity`.
pub fn disparity_to_depth(
    disparity: &[u16],
    width: usize,
    height: usize,
    intrinsics: &CameraIntrinsics,
) -> Result<DepthMap> {
    intrinsics.validate()?;
    let (Some(fx), Some(baseline)) = (intrinsics.focal_x, intrinsics.baseline) else {
        return Err(Error::invalid(
            "intrinsics",
            "disparity conversion needs focal_x and baseline",
        ));
    };
    if disparity.len() != width * height {
        return Err(Error::shape("disparity grid", width * height, disparity.len()));
    }
    let values: Vec<f64> = disparity
        .iter()
        .map(|&p| decode_disparity(p).map_or(INVALID, |d| baseline * fx / d))
        .collect();
    if values.iter().all(|v| *v == INVALID) {
        return Err(Error::invalid("disparity map", "no pixel carries a valid disparity"));
    }
    DepthMap::new(width, height, values)
}

/// Beam layout of the simulated scanner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarSimConfig {
    pub beams: usize,
    /// Lowest and highest beam elevation in degrees.
    pub vertical_fov_deg: (f64, f64),
    /// Probability that a return survives ray-drop.
    pub keep_ratio: f64,
    pub seed: u64,
}

impl Default for LidarSimConfig {
    /// 64 beams spanning -24.8..+2.0 degrees (HDL-64E geometry), 30 % ray-drop.
    fn default() -> Self {
        LidarSimConfig {
            beams: 64,
            vertical_fov_deg: (-24.8, 2.0),
            keep_ratio: 0.7,
            seed: 0,
        }
    }
}

impl LidarSimConfig {
    pub fn validate(&self, height: usize) -> Result<()> {
        if self.beams == 0 || self.beams > height {
            return Err(Error::invalid(
                "lidar config",
                format!("beams must be in 1..={height}, got {}", self.beams),
            ));
        }
        let (lo, hi) = self.vertical_fov_deg;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(
                "lidar config",
                format!("vertical fov must satisfy min < max, got ({lo}, {hi})"),
            ));
        }
        check_keep_ratio(self.keep_ratio)
    }

    /// Beam elevations in radians, uniformly spaced from the lower to the
    /// upper FOV limit inclusive. A single beam sits at the FOV centre.
    pub fn beam_angles(&self) -> Vec<f64> {
        let (lo, hi) = (
            self.vertical_fov_deg.0.to_radians(),
            self.vertical_fov_deg.1.to_radians(),
        );
        if self.beams == 1 {
            return vec![0.5 * (lo + hi)];
        }
        let step = (hi - lo) / (self.beams - 1) as f64;
        (0..self.beams).map(|k| lo + step * k as f64).collect()
    }
}

fn check_keep_ratio(keep_ratio: f64) -> Result<()> {
    if (0.0..=1.0).contains(&keep_ratio) {
        Ok(())
    } else {
        Err(Error::invalid(
            "keep ratio",
            format!("must be in [0, 1], got {keep_ratio}"),
        ))
    }
}

/// Rows of the image that the simulated beams land on.
///
/// Each beam whose elevation lies within the image's vertical extent (half a
/// row of slack at either end) selects the row whose angle is nearest to it,
/// considering only rows inside the FOV. Ties go to the upper row.
pub fn beam_rows(height: usize, intr: &CameraIntrinsics, cfg: &LidarSimConfig) -> Result<Vec<usize>> {
    intr.validate()?;
    cfg.validate(height)?;
    let (fov_lo, fov_hi) = (cfg.vertical_fov_deg.0.to_radians(), cfg.vertical_fov_deg.1.to_radians());
    let angles: Vec<f64> = (0..height).map(|r| intr.row_angle(r)).collect();
    let in_fov: Vec<usize> = (0..height)
        .filter(|&r| angles[r] >= fov_lo && angles[r] <= fov_hi)
        .collect();
    if in_fov.is_empty() {
        return Err(Error::invalid(
            "lidar simulation",
            "no image row falls inside the vertical field of view",
        ));
    }
    // Outer pixel edges of the image; angles decrease with the row index.
    let edge_angle = |y: f64| ((intr.principal_y - y) / intr.focal_y).atan();
    let top = edge_angle(-0.5);
    let bottom = edge_angle(height as f64 - 0.5);

    let mut rows = Vec::with_capacity(cfg.beams);
    for beam in cfg.beam_angles() {
        if beam > top || beam < bottom {
            continue;
        }
        let mut best = in_fov[0];
        let mut best_dist = (angles[best] - beam).abs();
        for &r in &in_fov[1..] {
            let dist = (angles[r] - beam).abs();
            if dist < best_dist {
                best = r;
                best_dist = dist;
            }
        }
        rows.push(best);
    }
    rows.sort_unstable();
    rows.dedup();
    Ok(rows)
}

/// Angle-binned LiDAR simulation: keeps the rows hit by a beam and
/// invalidates every other row. Retained values are copied unchanged.
pub fn simulate_lidar(dense: &DepthMap, intr: &CameraIntrinsics, cfg: &LidarSimConfig) -> Result<DepthMap> {
    if dense.height() < cfg.beams {
        return Err(Error::invalid(
            "lidar simulation",
            format!(
                "depth map has {} rows but {} beams were requested",
                dense.height(),
                cfg.beams
            ),
        ));
    }
    let rows = beam_rows(dense.height(), intr, cfg)?;
    let w = dense.width();
    let mut out = vec![INVALID; dense.values().len()];
    for r in rows {
        out[r * w..(r + 1) * w].copy_from_slice(dense.row(r));
    }
    DepthMap::new(w, dense.height(), out)
}

/// Drops each valid return independently, keeping it with probability
/// `keep_ratio`. Pixels are visited in row-major order and one uniform draw
/// is consumed per valid pixel, so the output depends only on the inputs.
pub fn ray_drop(sparse: &DepthMap, keep_ratio: f64, seed: u64) -> Result<DepthMap> {
    check_keep_ratio(keep_ratio)?;
    let mut rng = SeededRng::new(seed);
    let values = sparse
        .values()
        .iter()
        .map(|&v| {
            if v > 0.0 && rng.next_f64() < keep_ratio {
                v
            } else {
                INVALID
            }
        })
        .collect();
    DepthMap::new(sparse.width(), sparse.height(), values)
}

/// Simulation followed by ray-drop, using `cfg.keep_ratio` and `cfg.seed`.
pub fn simulate_sparse_lidar(dense: &DepthMap, intr: &CameraIntrinsics, cfg: &LidarSimConfig) -> Result<DepthMap> {
    let binned = simulate_lidar(dense, intr, cfg)?;
    ray_drop(&binned, cfg.keep_ratio, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intrinsics(fy: f64, cy: f64) -> CameraIntrinsics {
        CameraIntrinsics {
            focal_x: Some(2200.0),
            focal_y: fy,
            principal_x: Some(0.0),
            principal_y: cy,
            baseline: Some(0.21),
        }
    }

    #[test]
    fn rejects_negative_or_nan_depth() {
        assert!(DepthMap::new(2, 1, vec![1.0, -1.0]).is_err());
        assert!(DepthMap::new(2, 1, vec![1.0, f64::NAN]).is_err());
        assert!(DepthMap::new(0, 1, vec![]).is_err());
        assert!(DepthMap::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn disparity_sentinels() {
        assert_eq!(decode_disparity(0), None);
        assert_eq!(decode_disparity(1), None);
        assert_eq!(decode_disparity(257), Some(1.0));
    }

    #[test]
    fn disparity_worked_example() {
        let intr = intrinsics(2200.0, 0.0);
        let map = disparity_to_depth(&[0, 25601], 2, 1, &intr).unwrap();
        assert_eq!(map.get(0, 0), INVALID);
        // d = 25600 / 256 = 100, depth = 0.21 * 2200 / 100
        assert!((map.get(0, 1) - 4.62).abs() < 1e-12);
    }

    #[test]
    fn disparity_requires_baseline_and_focal_x() {
        let mut intr = intrinsics(2200.0, 0.0);
        intr.baseline = None;
        assert!(disparity_to_depth(&[300], 1, 1, &intr).is_err());
    }

    #[test]
    fn all_invalid_disparity_is_an_error() {
        let intr = intrinsics(2200.0, 0.0);
        assert!(disparity_to_depth(&[0, 1, 0], 3, 1, &intr).is_err());
    }

    #[test]
    fn disparity_round_trip_within_one_step() {
        let intr = intrinsics(2200.0, 0.0);
        let (fx, b) = (2200.0_f64, 0.21_f64);
        for depth in [3.0, 7.5, 20.0, 55.0, 120.0] {
            let d = b * fx / depth;
            let p = (d * 256.0).round() as u16 + 1;
            let back = disparity_to_depth(&[p], 1, 1, &intr).unwrap().get(0, 0);
            let d_back = b * fx / back;
            assert!((d_back - d).abs() <= 1.0 / 256.0);
        }
    }

    #[test]
    fn disparity_monotone_decreasing() {
        let intr = intrinsics(2200.0, 0.0);
        let raw: Vec<u16> = (2..2000).step_by(7).collect();
        let map = disparity_to_depth(&raw, raw.len(), 1, &intr).unwrap();
        assert!(map.values().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn lidar_identity_when_every_row_is_a_beam() {
        // fy large: row angles are close to uniform so each beam hits its own row.
        let h = 16;
        let intr = intrinsics(5000.0, 7.5);
        let lo = intr.row_angle(h - 1).to_degrees();
        let hi = intr.row_angle(0).to_degrees();
        let cfg = LidarSimConfig {
            beams: h,
            vertical_fov_deg: (lo - 1e-9, hi + 1e-9),
            ..Default::default()
        };
        let values: Vec<f64> = (0..h * 3).map(|i| 1.0 + i as f64).collect();
        let dense = DepthMap::new(3, h, values).unwrap();
        assert_eq!(simulate_lidar(&dense, &intr, &cfg).unwrap(), dense);
    }

    #[test]
    fn lidar_fov_outside_image_is_an_error() {
        let intr = intrinsics(100.0, 5.0);
        let cfg = LidarSimConfig {
            beams: 2,
            vertical_fov_deg: (40.0, 50.0),
            ..Default::default()
        };
        let dense = DepthMap::new(1, 10, vec![5.0; 10]).unwrap();
        assert!(simulate_lidar(&dense, &intr, &cfg).is_err());
    }

    #[test]
    fn lidar_rejects_more_beams_than_rows() {
        let intr = intrinsics(100.0, 5.0);
        let dense = DepthMap::new(1, 10, vec![5.0; 10]).unwrap();
        let cfg = LidarSimConfig::default();
        assert!(simulate_lidar(&dense, &intr, &cfg).is_err());
    }

    #[test]
    fn ray_drop_extremes() {
        let dense = DepthMap::new(4, 4, (1..=16).map(f64::from).collect()).unwrap();
        assert_eq!(ray_drop(&dense, 1.0, 9).unwrap(), dense);
        assert_eq!(ray_drop(&dense, 0.0, 9).unwrap().valid_count(), 0);
        assert!(ray_drop(&dense, 1.5, 9).is_err());
    }

    #[test]
    fn ray_drop_is_deterministic_per_seed() {
        let dense = DepthMap::new(32, 32, vec![4.0; 1024]).unwrap();
        let a = ray_drop(&dense, 0.5, 11).unwrap();
        let b = ray_drop(&dense, 0.5, 11).unwrap();
        let c = ray_drop(&dense, 0.5, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn intrinsics_json_shape() {
        let intr: CameraIntrinsics = serde_json::from_str(
            r#"{"focal_x": 2262.52, "focal_y": 2265.3, "principal_x": 1096.98, "principal_y": 513.137, "baseline": 0.209313}"#,
        )
        .unwrap();
        intr.validate().unwrap();
        assert_eq!(intr.baseline, Some(0.209313));
    }
}
