//! Panoptic Quality (PQ) and Video Panoptic Quality (VPQ).
//!
//! Both metrics share one engine: a set of frames is reduced to integer
//! overlap counts between ground-truth and predicted segments (tubes when
//! the set spans several frames), segments of the same category match when
//! their IoU exceeds 0.5, and per-category statistics accumulate
//! `iou_sum / (tp + fp/2 + fn/2)`.
//!
//! Void handling follows the COCO panoptic convention: ground-truth pixels
//! with id 0 are excluded from the union of a pair, and an unmatched
//! prediction lying more than half on void is not counted as a false positive.

mod pq;
mod vpq;

pub use pq::{compute_pq, frame_averaged_pq, match_segments, ClassResult, ClassStats, PqReport, PqStats, SegmentMatch};
pub use vpq::{build_tubes, compute_vpq, Tube, TubeKey, VpqAveraging, VpqConfig, VpqKResult, VpqReport};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::bbox_center;
use crate::error::{Error, Result};

/// Segment id reserved for void pixels.
pub const VOID: u32 = 0;

/// One entry of a `segments_info` list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u32,
    pub category_id: u32,
    pub is_thing: bool,
}

/// Per-pixel segment ids (row-major, 0 = void) with the category of every
/// segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticMap {
    width: usize,
    height: usize,
    ids: Vec<u32>,
    segments: BTreeMap<u32, SegmentInfo>,
}

impl PanopticMap {
    pub fn new(width: usize, height: usize, ids: Vec<u32>, segments: Vec<SegmentInfo>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(
                "panoptic map",
                format!("dimensions must be positive, got {width}x{height}"),
            ));
        }
        if ids.len() != width * height {
            return Err(Error::shape("panoptic map pixels", width * height, ids.len()));
        }
        let mut table = BTreeMap::new();
        for s in segments {
            if s.id == VOID {
                return Err(Error::invalid("segments_info", "segment id 0 is reserved for void"));
            }
            if table.insert(s.id, s).is_some() {
                return Err(Error::DuplicateSegment(s.id));
            }
        }
        if let Some(&missing) = ids.iter().find(|&&id| id != VOID && !table.contains_key(&id)) {
            return Err(Error::MissingSegment(missing));
        }
        Ok(PanopticMap {
            width,
            height,
            ids,
            segments: table,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn id_at(&self, row: usize, col: usize) -> u32 {
        self.ids[row * self.width + col]
    }

    pub fn segments(&self) -> impl Iterator<Item = &SegmentInfo> {
        self.segments.values()
    }

    pub fn segment(&self, id: u32) -> Option<&SegmentInfo> {
        self.segments.get(&id)
    }

    /// Category of a pixel, `None` on void.
    pub fn category_at(&self, row: usize, col: usize) -> Option<u32> {
        self.segments.get(&self.id_at(row, col)).map(|s| s.category_id)
    }

    /// Pixel count per segment id present in the map (void excluded).
    pub fn areas(&self) -> BTreeMap<u32, u64> {
        let mut areas = BTreeMap::new();
        for &id in self.ids.iter().filter(|&&id| id != VOID) {
            *areas.entry(id).or_insert(0) += 1;
        }
        areas
    }

    /// Normalised bounding-box centre of every segment present in the map.
    pub fn segment_centers(&self) -> BTreeMap<u32, [f64; 2]> {
        let mut pixels: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
        for (i, &id) in self.ids.iter().enumerate() {
            if id != VOID {
                pixels.entry(id).or_default().push((i / self.width, i % self.width));
            }
        }
        pixels
            .into_iter()
            .filter_map(|(id, px)| bbox_center(px, self.width, self.height).map(|c| (id, c)))
            .collect()
    }

    /// Replaces segment ids via `f` (void stays void). Used to relabel tracks.
    pub fn relabel(&self, mut f: impl FnMut(u32) -> u32) -> Result<Self> {
        let mut mapping = BTreeMap::new();
        for id in self.segments.keys() {
            mapping.insert(*id, f(*id));
        }
        let ids = self
            .ids
            .iter()
            .map(|id| if *id == VOID { VOID } else { mapping[id] })
            .collect();
        let segments = self
            .segments
            .values()
            .map(|s| SegmentInfo {
                id: mapping[&s.id],
                ..*s
            })
            .collect();
        PanopticMap::new(self.width, self.height, ids, segments)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    #[serde(default)]
    pub name: String,
    pub is_thing: bool,
}

/// The semantic classes under evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CategoryTable {
    categories: BTreeMap<u32, Category>,
}

impl CategoryTable {
    pub fn new(categories: impl IntoIterator<Item = Category>) -> Result<Self> {
        let mut table = BTreeMap::new();
        for c in categories {
            let id = c.id;
            if table.insert(id, c).is_some() {
                return Err(Error::invalid("category table", format!("duplicate category id {id}")));
            }
        }
        Ok(CategoryTable { categories: table })
    }

    /// Collects the categories named by the maps' segment lists. Conflicting
    /// thing/stuff flags for one category are rejected.
    pub fn infer<'a>(maps: impl IntoIterator<Item = &'a PanopticMap>) -> Result<Self> {
        let mut table: BTreeMap<u32, Category> = BTreeMap::new();
        for map in maps {
            for s in map.segments() {
                let entry = table.entry(s.category_id).or_insert_with(|| Category {
                    id: s.category_id,
                    name: String::new(),
                    is_thing: s.is_thing,
                });
                if entry.is_thing != s.is_thing {
                    return Err(Error::invalid(
                        "category table",
                        format!("category {} is both thing and stuff", s.category_id),
                    ));
                }
            }
        }
        Ok(CategoryTable { categories: table })
    }

    pub fn get(&self, id: u32) -> Option<&Category> {
        self.categories.get(&id)
    }

    pub fn is_thing(&self, id: u32) -> Result<bool> {
        self.get(id)
            .map(|c| c.is_thing)
            .ok_or_else(|| Error::invalid("category table", format!("unknown category {id}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Category> {
        self.categories.values()
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

fn check_same_dims(a: &PanopticMap, b: &PanopticMap) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(
            "panoptic map pair",
            format!("{}x{}", b.width, b.height),
            format!("{}x{}", a.width, a.height),
        ));
    }
    Ok(())
}

/// Runs `f` over `items`, on a dedicated pool when `threads > 1`. Results
/// come back in input order either way.
fn run_indexed<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>> {
    if threads <= 1 {
        return Ok(items.iter().map(f).collect());
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid("thread pool", e.to_string()))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}
