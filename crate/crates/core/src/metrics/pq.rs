use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{check_same_dims, run_indexed, CategoryTable, PanopticMap, TubeKey, VpqAveraging, VOID};
use crate::error::{Error, Result};

/// Accumulated counts of one category.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassStats {
    pub iou_sum: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassStats {
    /// A category participates once it has any gt or counted prediction.
    pub fn participates(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    pub fn pq(&self) -> Option<f64> {
        self.participates()
            .then(|| self.iou_sum / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64))
    }

    pub fn sq(&self) -> Option<f64> {
        (self.tp > 0).then(|| self.iou_sum / self.tp as f64)
    }

    pub fn rq(&self) -> Option<f64> {
        self.participates()
            .then(|| self.tp as f64 / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64))
    }

    fn merge(&mut self, other: &ClassStats) {
        self.iou_sum += other.iou_sum;
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Per-category statistics; merging is a plain sum.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PqStats {
    pub per_class: BTreeMap<u32, ClassStats>,
}

impl PqStats {
    pub fn merge(&mut self, other: &PqStats) {
        for (cat, s) in &other.per_class {
            self.per_class.entry(*cat).or_default().merge(s);
        }
    }

    /// Mean PQ over participating categories selected by `filter`.
    fn mean_pq(&self, cats: &CategoryTable, filter: impl Fn(bool) -> bool) -> Result<Option<f64>> {
        let mut values = Vec::new();
        for (cat, s) in &self.per_class {
            if filter(cats.is_thing(*cat)?) {
                values.extend(s.pq());
            }
        }
        Ok(mean(&values))
    }

    pub fn report(&self, cats: &CategoryTable) -> Result<PqReport> {
        let per_class = self
            .per_class
            .iter()
            .filter(|(_, s)| s.participates())
            .map(|(cat, s)| {
                Ok((
                    *cat,
                    ClassResult {
                        pq: s.pq(),
                        sq: s.sq(),
                        rq: s.rq(),
                        is_thing: cats.is_thing(*cat)?,
                        stats: *s,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(PqReport {
            all: self.mean_pq(cats, |_| true)?,
            things: self.mean_pq(cats, |t| t)?,
            stuff: self.mean_pq(cats, |t| !t)?,
            per_class,
        })
    }
}

pub(super) fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub is_thing: bool,
    #[serde(flatten)]
    pub stats: ClassStats,
}

/// `None` values mean no category of that kind took part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    pub all: Option<f64>,
    pub things: Option<f64>,
    pub stuff: Option<f64>,
    pub per_class: BTreeMap<u32, ClassResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentMatch {
    pub gt_id: u32,
    pub pred_id: u32,
    pub category_id: u32,
    pub iou: f64,
}

/// Integer overlap counts between gt and predicted segments (or tubes) over
/// a set of frames. `None` stands for void on either side.
#[derive(Debug, Default)]
pub(super) struct Overlaps {
    counts: BTreeMap<(Option<TubeKey>, Option<TubeKey>), u64>,
}

fn key(map: &PanopticMap, id: u32) -> Option<TubeKey> {
    (id != VOID).then(|| (id, map.segments[&id].category_id))
}

impl Overlaps {
    pub(super) fn add_frame(&mut self, pred: &PanopticMap, gt: &PanopticMap) -> Result<()> {
        check_same_dims(pred, gt)?;
        let mut local: std::collections::HashMap<(u32, u32), u64> = std::collections::HashMap::new();
        for (&g, &p) in gt.ids.iter().zip(&pred.ids) {
            *local.entry((g, p)).or_insert(0) += 1;
        }
        for ((g, p), n) in local {
            *self.counts.entry((key(gt, g), key(pred, p))).or_insert(0) += n;
        }
        Ok(())
    }

    /// Matches, unmatched gt keys and unmatched non-void-exempt pred keys.
    pub(super) fn evaluate(&self) -> Result<Evaluation> {
        let mut gt_area: BTreeMap<TubeKey, u64> = BTreeMap::new();
        let mut pred_area: BTreeMap<TubeKey, u64> = BTreeMap::new();
        let mut pred_on_void: BTreeMap<TubeKey, u64> = BTreeMap::new();
        for (&(g, p), &n) in &self.counts {
            if let Some(g) = g {
                *gt_area.entry(g).or_insert(0) += n;
            }
            if let Some(p) = p {
                *pred_area.entry(p).or_insert(0) += n;
                if g.is_none() {
                    *pred_on_void.entry(p).or_insert(0) += n;
                }
            }
        }
        let mut matches = Vec::new();
        let mut gt_matched: BTreeMap<TubeKey, TubeKey> = BTreeMap::new();
        let mut pred_matched: BTreeMap<TubeKey, TubeKey> = BTreeMap::new();
        for (&(g, p), &inter) in &self.counts {
            let (Some(g), Some(p)) = (g, p) else { continue };
            if g.1 != p.1 {
                continue;
            }
            let void = pred_on_void.get(&p).copied().unwrap_or(0);
            let union = pred_area[&p] + gt_area[&g] - inter - void;
            let iou = inter as f64 / union as f64;
            if iou <= 0.5 {
                continue;
            }
            if gt_matched.insert(g, p).is_some() || pred_matched.insert(p, g).is_some() {
                return Err(Error::invalid(
                    "segment matching",
                    format!("segment {g:?} or {p:?} matched twice"),
                ));
            }
            matches.push((g, p, iou));
        }
        let unmatched_gt = gt_area
            .keys()
            .filter(|g| !gt_matched.contains_key(g))
            .copied()
            .collect();
        let false_pos = pred_area
            .iter()
            .filter(|(p, area)| {
                let void = pred_on_void.get(p).copied().unwrap_or(0);
                !pred_matched.contains_key(p) && void as f64 / **area as f64 <= 0.5
            })
            .map(|(p, _)| *p)
            .collect();
        Ok(Evaluation {
            matches,
            unmatched_gt,
            false_pos,
        })
    }
}

pub(super) struct Evaluation {
    pub matches: Vec<(TubeKey, TubeKey, f64)>,
    pub unmatched_gt: Vec<TubeKey>,
    pub false_pos: Vec<TubeKey>,
}

impl Evaluation {
    pub(super) fn stats(&self, cats: &CategoryTable) -> Result<PqStats> {
        fn entry<'a>(stats: &'a mut PqStats, cats: &CategoryTable, cat: u32) -> Result<&'a mut ClassStats> {
            cats.is_thing(cat)?;
            Ok(stats.per_class.entry(cat).or_default())
        }
        let mut stats = PqStats::default();
        for &(g, _, iou) in &self.matches {
            let s = entry(&mut stats, cats, g.1)?;
            s.tp += 1;
            s.iou_sum += iou;
        }
        for g in &self.unmatched_gt {
            entry(&mut stats, cats, g.1)?.fn_ += 1;
        }
        for p in &self.false_pos {
            entry(&mut stats, cats, p.1)?.fp += 1;
        }
        Ok(stats)
    }
}

/// Same-category segment pairs with IoU above 0.5, ordered by gt id.
pub fn match_segments(pred: &PanopticMap, gt: &PanopticMap) -> Result<Vec<SegmentMatch>> {
    let mut overlaps = Overlaps::default();
    overlaps.add_frame(pred, gt)?;
    Ok(overlaps
        .evaluate()?
        .matches
        .into_iter()
        .map(|(g, p, iou)| SegmentMatch {
            gt_id: g.0,
            pred_id: p.0,
            category_id: g.1,
            iou,
        })
        .collect())
}

fn check_aligned(preds: &[PanopticMap], gts: &[PanopticMap]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::shape("prediction/ground-truth lists", gts.len(), preds.len()));
    }
    Ok(())
}

pub(super) fn frame_stats(pred: &PanopticMap, gt: &PanopticMap, cats: &CategoryTable) -> Result<PqStats> {
    let mut overlaps = Overlaps::default();
    overlaps.add_frame(pred, gt)?;
    overlaps.evaluate()?.stats(cats)
}

/// Dataset-level PQ: statistics are summed over all frame pairs before the
/// per-category formula is applied.
pub fn compute_pq(
    preds: &[PanopticMap],
    gts: &[PanopticMap],
    cats: &CategoryTable,
    threads: usize,
) -> Result<(PqStats, PqReport)> {
    check_aligned(preds, gts)?;
    let pairs: Vec<(&PanopticMap, &PanopticMap)> = preds.iter().zip(gts).collect();
    let per_frame = run_indexed(&pairs, threads, |(p, g)| frame_stats(p, g, cats))?;
    let mut total = PqStats::default();
    for s in per_frame {
        total.merge(&s?);
    }
    let report = total.report(cats)?;
    Ok((total, report))
}

/// Per-category PQ averaged over a list of separately scored units (frames
/// or windows), then over categories. Returns `(all, things, stuff)`.
pub(super) fn average_units(
    units: &[PqStats],
    cats: &CategoryTable,
    averaging: VpqAveraging,
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let per_class: BTreeMap<u32, f64> = match averaging {
        VpqAveraging::Pooled => {
            let mut total = PqStats::default();
            for u in units {
                total.merge(u);
            }
            total
                .per_class
                .iter()
                .filter_map(|(c, s)| s.pq().map(|v| (*c, v)))
                .collect()
        }
        VpqAveraging::WindowThenClass => {
            let mut values: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
            for u in units {
                for (c, s) in &u.per_class {
                    if let Some(v) = s.pq() {
                        values.entry(*c).or_default().push(v);
                    }
                }
            }
            values
                .into_iter()
                .filter_map(|(c, v)| mean(&v).map(|m| (c, m)))
                .collect()
        }
    };
    let mut all = Vec::new();
    let mut things = Vec::new();
    let mut stuff = Vec::new();
    for (c, v) in per_class {
        all.push(v);
        if cats.is_thing(c)? {
            things.push(v);
        } else {
            stuff.push(v);
        }
    }
    Ok((mean(&all), mean(&things), mean(&stuff)))
}

/// PQ of every frame on its own, combined with the same averaging rule as
/// VPQ. With one-frame windows the two are identical.
pub fn frame_averaged_pq(
    preds: &[PanopticMap],
    gts: &[PanopticMap],
    cats: &CategoryTable,
    averaging: VpqAveraging,
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    check_aligned(preds, gts)?;
    let units = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| frame_stats(p, g, cats))
        .collect::<Result<Vec<_>>>()?;
    average_units(&units, cats, averaging)
}
