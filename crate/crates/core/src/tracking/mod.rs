//! Video-free tracking by matching object queries of consecutive frames.

mod hungarian;

pub use hungarian::{hungarian, total_cost, MatchedPair};

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::decoder::QuerySet;
use crate::error::{Error, Result};

/// Rows are previous-frame queries, columns current-frame queries.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cost matrix", "entries must be finite"));
        }
        Ok(CostMatrix(values))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[[row, col]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    /// Largest entry; `0.0` for an empty matrix.
    pub fn max(&self) -> f64 {
        self.0.iter().copied().reduce(f64::max).unwrap_or(0.0)
    }
}

/// `1 - cos(a_i, b_j)` for every pair of rows. Rows with zero norm cost 1
/// against everything.
pub fn cosine_cost(prev: ArrayView2<'_, f64>, cur: ArrayView2<'_, f64>) -> Result<CostMatrix> {
    if prev.ncols() != cur.ncols() {
        return Err(Error::shape("cosine cost embedding width", prev.ncols(), cur.ncols()));
    }
    let norms = |m: ArrayView2<'_, f64>| -> Vec<f64> { m.outer_iter().map(|r| r.dot(&r).sqrt()).collect() };
    let (np, nc) = (norms(prev), norms(cur));
    let dots = prev.dot(&cur.t());
    let cost = Array2::from_shape_fn(dots.dim(), |(i, j)| {
        if np[i] == 0.0 || nc[j] == 0.0 {
            1.0
        } else {
            let cos = (dots[[i, j]] / (np[i] * nc[j])).clamp(-1.0, 1.0);
            1.0 - cos
        }
    });
    CostMatrix::new(cost)
}

/// Euclidean distance between centre rows (`N x 2` against `M x 2`).
pub fn position_cost(prev: ArrayView2<'_, f64>, cur: ArrayView2<'_, f64>) -> Result<CostMatrix> {
    if prev.ncols() != 2 || cur.ncols() != 2 {
        return Err(Error::shape(
            "position cost centres",
            "Nx2",
            format!("{}/{}", prev.ncols(), cur.ncols()),
        ));
    }
    let cost = Array2::from_shape_fn((prev.nrows(), cur.nrows()), |(i, j)| {
        let dx = prev[[i, 0]] - cur[[j, 0]];
        let dy = prev[[i, 1]] - cur[[j, 1]];
        dx.hypot(dy)
    });
    CostMatrix::new(cost)
}

/// Which query slots take part in matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MatchScope {
    #[default]
    AllSlots,
    NonEmptyOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub alpha_position: f64,
    pub match_scope: MatchScope,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            alpha_position: 0.0,
            match_scope: MatchScope::AllSlots,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_position.is_finite() && self.alpha_position >= 0.0) {
            return Err(Error::invalid(
                "match config",
                format!("alpha_position must be finite and >= 0, got {}", self.alpha_position),
            ));
        }
        Ok(())
    }
}

/// `appearance + alpha * position`. With `alpha = 0` the appearance matrix
/// is returned unchanged.
pub fn combine_costs(appearance: &CostMatrix, position: &CostMatrix, cfg: &MatchConfig) -> Result<CostMatrix> {
    cfg.validate()?;
    if appearance.dim() != position.dim() {
        return Err(Error::shape(
            "combined cost",
            format!("{:?}", appearance.dim()),
            format!("{:?}", position.dim()),
        ));
    }
    if cfg.alpha_position == 0.0 {
        return Ok(appearance.clone());
    }
    CostMatrix::new(&appearance.0 + &(&position.0 * cfg.alpha_position))
}

/// Source of fresh, never reused track ids (starting at 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdAllocator {
    next: u64,
}

impl Default for IdAllocator {
    fn default() -> Self {
        IdAllocator { next: 1 }
    }
}

impl IdAllocator {
    pub fn fresh(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        id
    }

    pub fn peek(&self) -> u64 {
        self.next
    }
}

/// Matching result of one frame with persistent ids attached.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackAssignment {
    pub pairs: Vec<MatchedPair>,
    /// `(slot, id)` for every current query that opened a new track.
    pub fresh_track_ids: Vec<(usize, u64)>,
    /// Track id per current slot; `None` for empty queries.
    pub track_ids: Vec<Option<u64>>,
}

/// Attaches track ids to the current frame. A non-empty current query
/// matched to a previous slot that carried an id inherits it; every other
/// non-empty query opens a fresh track (in slot order); empty queries get no id.
pub fn propagate_ids(
    pairs: &[MatchedPair],
    prev_ids: &[Option<u64>],
    non_empty_cur: &[bool],
    ids: &mut IdAllocator,
) -> Result<TrackAssignment> {
    let mut inherited: HashMap<usize, u64> = HashMap::new();
    for p in pairs {
        let prev = prev_ids.get(p.prev).ok_or_else(|| {
            Error::invalid(
                "id propagation",
                format!("pair refers to previous slot {} of {}", p.prev, prev_ids.len()),
            )
        })?;
        if p.cur >= non_empty_cur.len() {
            return Err(Error::invalid(
                "id propagation",
                format!("pair refers to current slot {} of {}", p.cur, non_empty_cur.len()),
            ));
        }
        if let Some(id) = prev {
            if inherited.insert(p.cur, *id).is_some() {
                return Err(Error::invalid(
                    "id propagation",
                    format!("current slot {} matched twice", p.cur),
                ));
            }
        }
    }
    let mut fresh_track_ids = Vec::new();
    let track_ids = non_empty_cur
        .iter()
        .enumerate()
        .map(|(slot, &non_empty)| {
            if !non_empty {
                return None;
            }
            Some(inherited.get(&slot).copied().unwrap_or_else(|| {
                let id = ids.fresh();
                fresh_track_ids.push((slot, id));
                id
            }))
        })
        .collect();
    Ok(TrackAssignment {
        pairs: pairs.to_vec(),
        fresh_track_ids,
        track_ids,
    })
}

/// One row of the `tracks.json` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub slot: usize,
    pub track_id: u64,
    /// Match cost for continued tracks, `null` for fresh ones.
    pub cost: Option<f64>,
    pub center: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTracks {
    pub frame: usize,
    pub tracks: Vec<TrackEntry>,
}

struct PrevFrame {
    embeddings: Array2<f64>,
    centers: Option<Array2<f64>>,
    non_empty: Vec<bool>,
    ids: Vec<Option<u64>>,
}

/// Online tracker: feed one query set per frame, in order.
pub struct Tracker {
    cfg: MatchConfig,
    ids: IdAllocator,
    prev: Option<PrevFrame>,
    frame: usize,
}

impl Tracker {
    pub fn new(cfg: MatchConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Tracker {
            cfg,
            ids: IdAllocator::default(),
            prev: None,
            frame: 0,
        })
    }

    pub fn config(&self) -> &MatchConfig {
        &self.cfg
    }

    fn slots(&self, non_empty: &[bool]) -> Vec<usize> {
        match self.cfg.match_scope {
            MatchScope::AllSlots => (0..non_empty.len()).collect(),
            MatchScope::NonEmptyOnly => (0..non_empty.len()).filter(|&i| non_empty[i]).collect(),
        }
    }

    /// Matches `queries` against the previous frame and returns the slot
    /// assignment with track ids. Queries without class logits count as
    /// non-empty.
    pub fn step(&mut self, queries: &QuerySet) -> Result<(TrackAssignment, FrameTracks)> {
        let non_empty = queries.non_empty_flags().unwrap_or_else(|| vec![true; queries.len()]);
        if self.cfg.alpha_position > 0.0 && queries.centers.is_none() {
            return Err(Error::invalid("tracker", "position matching needs query centres"));
        }
        let assignment = match self.prev.take() {
            None => propagate_ids(&[], &[], &non_empty, &mut self.ids)?,
            Some(prev) => {
                let rows = self.slots(&prev.non_empty);
                let cols = self.slots(&non_empty);
                let pick = |m: &Array2<f64>, idx: &[usize]| m.select(ndarray::Axis(0), idx);
                let appearance = cosine_cost(
                    pick(&prev.embeddings, &rows).view(),
                    pick(&queries.embeddings, &cols).view(),
                )?;
                let cost = match (&prev.centers, &queries.centers) {
                    (Some(pc), Some(cc)) if self.cfg.alpha_position > 0.0 => {
                        let position = position_cost(pick(pc, &rows).view(), pick(cc, &cols).view())?;
                        combine_costs(&appearance, &position, &self.cfg)?
                    }
                    (None, _) if self.cfg.alpha_position > 0.0 => {
                        return Err(Error::invalid("tracker", "position matching needs query centres"));
                    }
                    _ => appearance,
                };
                let pairs: Vec<MatchedPair> = hungarian(&cost)
                    .into_iter()
                    .map(|p| MatchedPair {
                        prev: rows[p.prev],
                        cur: cols[p.cur],
                        cost: p.cost,
                    })
                    .collect();
                propagate_ids(&pairs, &prev.ids, &non_empty, &mut self.ids)?
            }
        };

        let pair_cost: BTreeMap<usize, f64> = assignment.pairs.iter().map(|p| (p.cur, p.cost)).collect();
        let fresh: Vec<usize> = assignment.fresh_track_ids.iter().map(|(s, _)| *s).collect();
        let tracks = assignment
            .track_ids
            .iter()
            .enumerate()
            .filter_map(|(slot, id)| {
                id.map(|track_id| TrackEntry {
                    slot,
                    track_id,
                    cost: if fresh.contains(&slot) {
                        None
                    } else {
                        pair_cost.get(&slot).copied()
                    },
                    center: queries.centers.as_ref().map(|c| [c[[slot, 0]], c[[slot, 1]]]),
                })
            })
            .collect();
        let report = FrameTracks {
            frame: self.frame,
            tracks,
        };
        self.prev = Some(PrevFrame {
            embeddings: queries.embeddings.clone(),
            centers: queries.centers.clone(),
            non_empty,
            ids: assignment.track_ids.clone(),
        });
        self.frame += 1;
        Ok((assignment, report))
    }
}

/// Counts identity switches: for every ground-truth object, the number of
/// consecutive frames in which it is observed with two different track ids.
///
/// `frames[t]` maps object -> track id observed at frame `t`.
pub fn count_id_switches<K: Ord + Clone>(frames: &[BTreeMap<K, u64>]) -> usize {
    let mut last: BTreeMap<K, u64> = BTreeMap::new();
    let mut switches = 0;
    for frame in frames {
        for (obj, id) in frame {
            if let Some(prev) = last.insert(obj.clone(), *id) {
                if prev != *id {
                    switches += 1;
                }
            }
        }
    }
    switches
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn cosine_extremes() {
        let a = arr2(&[[1.0, 0.0], [0.0, 0.0]]);
        let b = arr2(&[[1.0, 0.0], [0.0, 3.0], [-2.0, 0.0]]);
        let c = cosine_cost(a.view(), b.view()).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
        assert_eq!(c.get(0, 1), 1.0);
        assert_eq!(c.get(0, 2), 2.0);
        assert!((0..3).all(|j| c.get(1, j) == 1.0));
    }

    #[test]
    fn cosine_width_mismatch() {
        assert!(cosine_cost(arr2(&[[1.0, 0.0]]).view(), arr2(&[[1.0, 0.0, 0.0]]).view()).is_err());
    }

    #[test]
    fn position_extremes() {
        let c = position_cost(
            arr2(&[[0.0, 0.0], [0.3, 0.3]]).view(),
            arr2(&[[1.0, 1.0], [0.3, 0.3]]).view(),
        )
        .unwrap();
        assert_eq!(c.get(0, 0), 2f64.sqrt());
        assert_eq!(c.get(1, 1), 0.0);
    }

    #[test]
    fn combine_alpha_zero_is_bitwise_appearance() {
        let a = CostMatrix::new(arr2(&[[0.1, 0.7], [1.3, 0.2]])).unwrap();
        let p = CostMatrix::new(arr2(&[[0.5, 0.4], [0.3, 0.9]])).unwrap();
        assert_eq!(combine_costs(&a, &p, &MatchConfig::default()).unwrap(), a);
        let zero = CostMatrix::new(Array2::zeros((2, 2))).unwrap();
        let cfg = MatchConfig {
            alpha_position: 1.0,
            ..Default::default()
        };
        assert_eq!(combine_costs(&zero, &p, &cfg).unwrap(), p);
        let bad = CostMatrix::new(Array2::zeros((1, 2))).unwrap();
        assert!(combine_costs(&bad, &p, &cfg).is_err());
    }

    #[test]
    fn ids_unchanged_under_identity_matching() {
        let pairs: Vec<MatchedPair> = (0..3)
            .map(|i| MatchedPair {
                prev: i,
                cur: i,
                cost: 0.0,
            })
            .collect();
        let mut ids = IdAllocator::default();
        ids.fresh();
        ids.fresh();
        ids.fresh();
        let out = propagate_ids(&pairs, &[Some(1), Some(2), Some(3)], &[true; 3], &mut ids).unwrap();
        assert_eq!(out.track_ids, vec![Some(1), Some(2), Some(3)]);
        assert!(out.fresh_track_ids.is_empty());
    }

    #[test]
    fn no_matches_means_fresh_ids() {
        let mut ids = IdAllocator::default();
        let out = propagate_ids(&[], &[Some(7)], &[true, false, true], &mut ids).unwrap();
        assert_eq!(out.track_ids, vec![Some(1), None, Some(2)]);
        assert_eq!(out.fresh_track_ids, vec![(0, 1), (2, 2)]);
    }

    #[test]
    fn mixed_case_table() {
        // prev slots: 0 -> id 4, 1 -> empty, 2 -> id 6, 3 -> id 5
        // pairs: 0->2, 1->0, 2->1, 3->3 ; current slot 3 is empty
        let prev_ids = [Some(4), None, Some(6), Some(5)];
        let pairs = [(0, 2), (1, 0), (2, 1), (3, 3)].map(|(p, c)| MatchedPair {
            prev: p,
            cur: c,
            cost: 0.5,
        });
        let mut ids = IdAllocator { next: 7 };
        let out = propagate_ids(&pairs, &prev_ids, &[true, true, true, false], &mut ids).unwrap();
        // slot 0 came from an empty previous slot -> fresh 7
        // slot 1 inherits 6, slot 2 inherits 4, slot 3 empty
        assert_eq!(out.track_ids, vec![Some(7), Some(6), Some(4), None]);
        assert_eq!(out.fresh_track_ids, vec![(0, 7)]);
        assert_eq!(ids.peek(), 8);
    }

    #[test]
    fn tracker_follows_permuted_slots() {
        let mut tracker = Tracker::new(MatchConfig::default()).unwrap();
        let f0 = QuerySet::from_embeddings(arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]));
        let f1 = QuerySet::from_embeddings(arr2(&[[0.0, 0.0, 1.0], [1.0, 0.1, 0.0], [0.0, 1.0, 0.0]]));
        let (a0, _) = tracker.step(&f0).unwrap();
        let (a1, report) = tracker.step(&f1).unwrap();
        assert_eq!(a0.track_ids, vec![Some(1), Some(2), Some(3)]);
        assert_eq!(a1.track_ids, vec![Some(3), Some(1), Some(2)]);
        assert_eq!(report.frame, 1);
        assert!(report.tracks.iter().all(|t| t.cost.is_some()));
    }

    #[test]
    fn switch_counting() {
        let frames: Vec<BTreeMap<&str, u64>> = vec![
            [("a", 1), ("b", 2)].into(),
            [("a", 2), ("b", 1)].into(),
            [("a", 2)].into(),
            [("a", 2), ("b", 1)].into(),
        ];
        assert_eq!(count_id_switches(&frames), 2);
    }
}
