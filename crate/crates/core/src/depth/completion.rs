//! Classical morphological depth completion.
//!
//! The sparse map is inverted (`cap - depth`) so that nearer surfaces win
//! under grey-scale dilation, pushed through a fixed sequence of
//! morphological stages and inverted back. Validity is tracked with an
//! explicit mask; an invalid pixel acts as the bottom element of the
//! lattice, i.e. it never wins a dilation and always wins an erosion.
//!
//! Stage order: diamond dilation, full-kernel closing, small-hole fill,
//! column extension to the top valid row, repeated large-hole fill, median
//! filter, masked normalised Gaussian blur.

use serde::{Deserialize, Serialize};

use super::DepthMap;
use crate::error::{Error, Result};

/// Binary structuring element on a square `size x size` support.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Kernel {
    size: usize,
    mask: Vec<bool>,
    full: bool,
}

impl Kernel {
    pub fn full(size: usize) -> Self {
        Kernel {
            size,
            mask: vec![true; size * size],
            full: true,
        }
    }

    /// L1 ball of radius `size / 2`.
    pub fn diamond(size: usize) -> Self {
        let r = (size / 2) as isize;
        let mask = (0..size * size)
            .map(|i| {
                let dy = (i / size) as isize - r;
                let dx = (i % size) as isize - r;
                dy.abs() + dx.abs() <= r
            })
            .collect();
        Kernel {
            size,
            mask,
            full: false,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn contains(&self, dy: isize, dx: isize) -> bool {
        let r = self.radius() as isize;
        if dy.abs() > r || dx.abs() > r {
            return false;
        }
        self.mask[((dy + r) as usize) * self.size + (dx + r) as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionConfig {
    /// Depth used for inversion; valid inputs should lie below it.
    pub max_depth: f64,
    /// Diamond kernel for the initial dilation.
    pub dilation_kernel: usize,
    pub closing_kernel: usize,
    pub small_fill_kernel: usize,
    pub large_fill_kernel: usize,
    pub median_kernel: usize,
    pub blur_kernel: usize,
    pub enable_blur: bool,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig {
            max_depth: 100.0,
            dilation_kernel: 5,
            closing_kernel: 5,
            small_fill_kernel: 7,
            large_fill_kernel: 31,
            median_kernel: 5,
            blur_kernel: 5,
            enable_blur: true,
        }
    }
}

impl CompletionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_depth.is_finite() && self.max_depth > 0.0) {
            return Err(Error::invalid(
                "completion config",
                format!("max_depth must be finite and > 0, got {}", self.max_depth),
            ));
        }
        for (name, k) in [
            ("dilation_kernel", self.dilation_kernel),
            ("closing_kernel", self.closing_kernel),
            ("small_fill_kernel", self.small_fill_kernel),
            ("large_fill_kernel", self.large_fill_kernel),
            ("median_kernel", self.median_kernel),
            ("blur_kernel", self.blur_kernel),
        ] {
            if k < 3 || k % 2 == 0 {
                return Err(Error::invalid(
                    "completion config",
                    format!("{name} must be odd and >= 3, got {k}"),
                ));
            }
        }
        Ok(())
    }
}

/// Working grid of a completion stage: values plus validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl StageGrid {
    fn idx(&self, r: usize, c: usize) -> usize {
        r * self.width + c
    }

    pub fn top_valid_row(&self) -> Option<usize> {
        (0..self.height).find(|&r| (0..self.width).any(|c| self.valid[self.idx(r, c)]))
    }

    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
}

/// Every intermediate grid of one completion run, in inverted space except
/// for `output`.
#[derive(Debug, Clone)]
pub struct CompletionStages {
    pub inverted: StageGrid,
    pub dilated: StageGrid,
    pub closed: StageGrid,
    pub small_filled: StageGrid,
    pub extended: StageGrid,
    pub large_filled: StageGrid,
    pub median: StageGrid,
    pub blurred: StageGrid,
    pub output: DepthMap,
}

/// Densifies a sparse depth map. After completion every pixel at or below the
/// topmost valid input row is valid and all values lie within the input's
/// valid range.
pub fn complete_depth(sparse: &DepthMap, cfg: &CompletionConfig) -> Result<DepthMap> {
    Ok(complete_depth_staged(sparse, cfg)?.output)
}

/// Same as [`complete_depth`] but keeps every intermediate stage.
pub fn complete_depth_staged(sparse: &DepthMap, cfg: &CompletionConfig) -> Result<CompletionStages> {
    cfg.validate()?;
    let (lo, hi) = sparse
        .valid_range()
        .ok_or_else(|| Error::invalid("depth completion", "input has no valid pixel"))?;

    let inverted = invert(sparse, cfg.max_depth);
    let dilated = dilate(&inverted, &Kernel::diamond(cfg.dilation_kernel));
    let closed = close(&dilated, &Kernel::full(cfg.closing_kernel));
    let small_filled = fill_invalid(&closed, &Kernel::full(cfg.small_fill_kernel), 0);
    let extended = extend_columns(&small_filled);
    let top = extended.top_valid_row().unwrap_or(0);
    let large = Kernel::full(cfg.large_fill_kernel);
    let mut large_filled = fill_invalid(&extended, &large, top);
    // Holes wider than the kernel need more than one pass.
    while region_has_holes(&large_filled, top) {
        large_filled = fill_invalid(&large_filled, &large, top);
    }
    let median = median_filter(&large_filled, cfg.median_kernel);
    let blurred = if cfg.enable_blur {
        gaussian_blur(&median, cfg.blur_kernel)
    } else {
        median.clone()
    };
    let output = restore(&blurred, cfg.max_depth, lo, hi)?;
    Ok(CompletionStages {
        inverted,
        dilated,
        closed,
        small_filled,
        extended,
        large_filled,
        median,
        blurred,
        output,
    })
}

pub fn invert(map: &DepthMap, cap: f64) -> StageGrid {
    let valid: Vec<bool> = map.values().iter().map(|v| *v > 0.0).collect();
    let values = map
        .values()
        .iter()
        .zip(&valid)
        .map(|(v, ok)| if *ok { cap - v } else { 0.0 })
        .collect();
    StageGrid {
        width: map.width(),
        height: map.height(),
        values,
        valid,
    }
}

/// Inverts back to depth and clamps to `[lo, hi]`, absorbing the rounding of
/// `cap - (cap - d)` and of the blur normalisation.
fn restore(grid: &StageGrid, cap: f64, lo: f64, hi: f64) -> Result<DepthMap> {
    let values = grid
        .values
        .iter()
        .zip(&grid.valid)
        .map(|(v, ok)| if *ok { (cap - v).clamp(lo, hi) } else { 0.0 })
        .collect();
    DepthMap::new(grid.width, grid.height, values)
}

#[derive(Clone, Copy)]
enum Extremum {
    Max,
    Min,
}

/// One 1-D pass of a full-kernel morphological filter. For `Max` the output
/// is valid when any input in the window is valid; for `Min` it is valid only
/// when all in-bounds inputs are valid.
fn morph_pass(grid: &StageGrid, radius: usize, horizontal: bool, op: Extremum) -> StageGrid {
    let (w, h) = (grid.width, grid.height);
    let mut values = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            let (pos, len) = if horizontal { (c, w) } else { (r, h) };
            let start = pos.saturating_sub(radius);
            let end = (pos + radius).min(len - 1);
            let mut acc: Option<f64> = None;
            let mut any_invalid = false;
            for k in start..=end {
                let i = if horizontal { r * w + k } else { k * w + c };
                if grid.valid[i] {
                    let v = grid.values[i];
                    acc = Some(match (acc, op) {
                        (None, _) => v,
                        (Some(a), Extremum::Max) => a.max(v),
                        (Some(a), Extremum::Min) => a.min(v),
                    });
                } else {
                    any_invalid = true;
                }
            }
            if let Some(v) = acc {
                if matches!(op, Extremum::Max) || !any_invalid {
                    values[r * w + c] = v;
                    valid[r * w + c] = true;
                }
            }
        }
    }
    StageGrid {
        width: w,
        height: h,
        values,
        valid,
    }
}

fn morph_generic(grid: &StageGrid, kernel: &Kernel, op: Extremum) -> StageGrid {
    let (w, h) = (grid.width, grid.height);
    let r = kernel.radius() as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| kernel.contains(dy, dx))
        .collect();
    let mut values = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for row in 0..h {
        for col in 0..w {
            let mut acc: Option<f64> = None;
            let mut any_invalid = false;
            for &(dy, dx) in &offsets {
                let (y, x) = (row as isize + dy, col as isize + dx);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let i = y as usize * w + x as usize;
                if grid.valid[i] {
                    let v = grid.values[i];
                    acc = Some(match (acc, op) {
                        (None, _) => v,
                        (Some(a), Extremum::Max) => a.max(v),
                        (Some(a), Extremum::Min) => a.min(v),
                    });
                } else {
                    any_invalid = true;
                }
            }
            if let Some(v) = acc {
                if matches!(op, Extremum::Max) || !any_invalid {
                    values[row * w + col] = v;
                    valid[row * w + col] = true;
                }
            }
        }
    }
    StageGrid {
        width: w,
        height: h,
        values,
        valid,
    }
}

fn morph(grid: &StageGrid, kernel: &Kernel, op: Extremum) -> StageGrid {
    if kernel.full {
        // Square supports separate into a row pass and a column pass.
        let rows = morph_pass(grid, kernel.radius(), true, op);
        morph_pass(&rows, kernel.radius(), false, op)
    } else {
        morph_generic(grid, kernel, op)
    }
}

pub fn dilate(grid: &StageGrid, kernel: &Kernel) -> StageGrid {
    morph(grid, kernel, Extremum::Max)
}

pub fn erode(grid: &StageGrid, kernel: &Kernel) -> StageGrid {
    morph(grid, kernel, Extremum::Min)
}

pub fn close(grid: &StageGrid, kernel: &Kernel) -> StageGrid {
    erode(&dilate(grid, kernel), kernel)
}

/// Replaces invalid pixels in rows `from_row..` with their dilated value.
pub fn fill_invalid(grid: &StageGrid, kernel: &Kernel, from_row: usize) -> StageGrid {
    let dilated = dilate(grid, kernel);
    let mut out = grid.clone();
    for i in from_row * grid.width..grid.values.len() {
        if !out.valid[i] && dilated.valid[i] {
            out.values[i] = dilated.values[i];
            out.valid[i] = true;
        }
    }
    out
}

fn region_has_holes(grid: &StageGrid, from_row: usize) -> bool {
    grid.valid[from_row * grid.width..].iter().any(|v| !v)
}

/// Copies each column's topmost valid value upward to the grid's topmost
/// valid row. Columns without any valid pixel are left untouched.
pub fn extend_columns(grid: &StageGrid) -> StageGrid {
    let mut out = grid.clone();
    let Some(top) = grid.top_valid_row() else {
        return out;
    };
    for c in 0..grid.width {
        let Some(first) = (top..grid.height).find(|&r| grid.valid[grid.idx(r, c)]) else {
            continue;
        };
        let v = grid.values[grid.idx(first, c)];
        for r in top..first {
            let i = out.idx(r, c);
            out.values[i] = v;
            out.valid[i] = true;
        }
    }
    out
}

/// Median over the valid pixels of the window, evaluated at valid pixels
/// only. Even counts take the lower middle element so the result is always
/// one of the inputs.
pub fn median_filter(grid: &StageGrid, size: usize) -> StageGrid {
    let (w, h) = (grid.width, grid.height);
    let r = size / 2;
    let mut out = grid.clone();
    let mut window = Vec::with_capacity(size * size);
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            if !grid.valid[i] {
                continue;
            }
            window.clear();
            for y in row.saturating_sub(r)..=(row + r).min(h - 1) {
                for x in col.saturating_sub(r)..=(col + r).min(w - 1) {
                    let j = y * w + x;
                    if grid.valid[j] {
                        window.push(grid.values[j]);
                    }
                }
            }
            let mid = (window.len() - 1) / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
            out.values[i] = *m;
        }
    }
    out
}

/// Normalised binomial weights approximating a Gaussian of the given odd size
/// (`[1, 4, 6, 4, 1] / 16` for size 5).
pub fn binomial_weights(size: usize) -> Vec<f64> {
    let mut row = vec![1.0f64];
    for _ in 1..size {
        let mut next = vec![1.0; row.len() + 1];
        for k in 1..row.len() {
            next[k] = row[k - 1] + row[k];
        }
        row = next;
    }
    let total: f64 = row.iter().sum();
    row.iter().map(|v| v / total).collect()
}

/// Gaussian blur evaluated at valid pixels only, averaging over valid
/// neighbours with the weights renormalised to the valid support.
pub fn gaussian_blur(grid: &StageGrid, size: usize) -> StageGrid {
    let (w, h) = (grid.width, grid.height);
    let r = size / 2;
    let weights = binomial_weights(size);
    // Separable: numerator and denominator are blurred independently.
    let mut row_num = vec![0.0; w * h];
    let mut row_den = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut num, mut den) = (0.0, 0.0);
            for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                let j = y * w + xx;
                if grid.valid[j] {
                    let wt = weights[xx + r - x];
                    num += wt * grid.values[j];
                    den += wt;
                }
            }
            row_num[y * w + x] = num;
            row_den[y * w + x] = den;
        }
    }
    let mut out = grid.clone();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !grid.valid[i] {
                continue;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                let wt = weights[yy + r - y];
                num += wt * row_num[yy * w + x];
                den += wt * row_den[yy * w + x];
            }
            out.values[i] = num / den;
        }
    }
    out
}
