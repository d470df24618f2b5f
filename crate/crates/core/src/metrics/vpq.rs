use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::pq::{average_units, mean, Overlaps};
use super::{run_indexed, CategoryTable, PanopticMap, PqStats, VOID};
use crate::error::{Error, Result};

/// A tube is identified by its segment (track) id and category.
pub type TubeKey = (u32, u32);

/// Pixels of one track inside a window, as `(frame offset, pixel index)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tube {
    pub key: TubeKey,
    pub pixels: Vec<(usize, usize)>,
}

/// Groups the pixels of `frames` by `(segment id, category)`.
pub fn build_tubes(frames: &[PanopticMap]) -> BTreeMap<TubeKey, Tube> {
    let mut tubes: BTreeMap<TubeKey, Tube> = BTreeMap::new();
    for (t, frame) in frames.iter().enumerate() {
        for (i, &id) in frame.ids().iter().enumerate() {
            if id == VOID {
                continue;
            }
            let key = (id, frame.segments[&id].category_id);
            tubes
                .entry(key)
                .or_insert_with(|| Tube {
                    key,
                    pixels: Vec::new(),
                })
                .pixels
                .push((t, i));
        }
    }
    tubes
}

/// How per-window results are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VpqAveraging {
    /// PQ per category and window, averaged over the windows in which the
    /// category takes part, then over categories.
    #[default]
    WindowThenClass,
    /// Statistics summed over all windows before the per-category formula.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VpqConfig {
    /// Temporal distance labels; each must be a multiple of the stride.
    pub k_labels: Vec<u32>,
    /// Distance in raw frames between consecutive annotated frames.
    pub sampling_stride: u32,
    #[serde(default)]
    pub averaging: VpqAveraging,
}

impl Default for VpqConfig {
    fn default() -> Self {
        VpqConfig::from_stride(5)
    }
}

impl VpqConfig {
    pub fn from_stride(stride: u32) -> Self {
        VpqConfig {
            k_labels: vec![0, stride, 2 * stride, 3 * stride],
            sampling_stride: stride,
            averaging: VpqAveraging::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sampling_stride == 0 {
            return Err(Error::invalid("VPQ config", "sampling_stride must be positive"));
        }
        if self.k_labels.is_empty() {
            return Err(Error::invalid("VPQ config", "k_labels is empty"));
        }
        if let Some(k) = self.k_labels.iter().find(|k| *k % self.sampling_stride != 0) {
            return Err(Error::invalid(
                "VPQ config",
                format!("k label {k} is not a multiple of the stride {}", self.sampling_stride),
            ));
        }
        Ok(())
    }

    /// Window length in annotated frames: `k / stride + 1`.
    pub fn window_len(&self, k: u32) -> usize {
        (k / self.sampling_stride) as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VpqKResult {
    pub k: u32,
    pub window: usize,
    /// Number of window positions evaluated; 0 when the sequence is shorter
    /// than the window, in which case the values are absent.
    pub windows: usize,
    pub all: Option<f64>,
    pub things: Option<f64>,
    pub stuff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VpqReport {
    /// Mean over the k labels with a value.
    pub mean: Option<f64>,
    pub things: Option<f64>,
    pub stuff: Option<f64>,
    pub per_k: Vec<VpqKResult>,
}

fn window_stats(preds: &[PanopticMap], gts: &[PanopticMap], cats: &CategoryTable) -> Result<PqStats> {
    let mut overlaps = Overlaps::default();
    for (p, g) in preds.iter().zip(gts) {
        overlaps.add_frame(p, g)?;
    }
    overlaps.evaluate()?.stats(cats)
}

/// VPQ over one sequence. Predicted segment ids must be track ids (stable
/// across frames); gt ids likewise.
pub fn compute_vpq(
    preds: &[PanopticMap],
    gts: &[PanopticMap],
    cats: &CategoryTable,
    cfg: &VpqConfig,
    threads: usize,
) -> Result<VpqReport> {
    cfg.validate()?;
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "prediction/ground-truth sequences",
            gts.len(),
            preds.len(),
        ));
    }
    let mut per_k = Vec::with_capacity(cfg.k_labels.len());
    for &k in &cfg.k_labels {
        let window = cfg.window_len(k);
        let starts: Vec<usize> = if preds.len() >= window {
            (0..=preds.len() - window).collect()
        } else {
            Vec::new()
        };
        let units = run_indexed(&starts, threads, |&s| {
            window_stats(&preds[s..s + window], &gts[s..s + window], cats)
        })?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (all, things, stuff) = if units.is_empty() {
            (None, None, None)
        } else {
            average_units(&units, cats, cfg.averaging)?
        };
        per_k.push(VpqKResult {
            k,
            window,
            windows: units.len(),
            all,
            things,
            stuff,
        });
    }
    let over_k = |f: fn(&VpqKResult) -> Option<f64>| mean(&per_k.iter().filter_map(f).collect::<Vec<_>>());
    Ok(VpqReport {
        mean: over_k(|r| r.all),
        things: over_k(|r| r.things),
        stuff: over_k(|r| r.stuff),
        per_k,
    })
}
