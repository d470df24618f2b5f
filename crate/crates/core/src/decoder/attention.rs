//! Single-head scaled dot-product attention, optionally masked.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::fusion::FeatureMap;
use crate::rng::SeededRng;

/// Projection matrices of one attention block, each `C x C`, applied as
/// `x · Wᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
}

impl AttentionWeights {
    pub fn init(dim: usize, rng: &mut SeededRng) -> Self {
        let mut m = || linear_init(dim, dim, rng);
        AttentionWeights {
            query: m(),
            key: m(),
            value: m(),
            output: m(),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.nrows()
    }
}

/// Uniform in `±1/sqrt(fan_in)`, shaped `out x in`.
pub(crate) fn linear_init(out: usize, fan_in: usize, rng: &mut SeededRng) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((out, fan_in), || rng.uniform(-bound, bound))
}

/// Per-query boolean mask over feature locations, `N x (H*W)`. `true` means
/// the query may attend to that location.
pub type AttentionMask = Array2<bool>;

/// Result of an attention block: residual-updated embeddings and the
/// attention distribution of every query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub embeddings: Array2<f64>,
    pub weights: Array2<f64>,
}

/// Row-wise softmax restricted to allowed entries. A row with no allowed
/// entry falls back to the full row.
fn masked_softmax(scores: &Array2<f64>, mask: Option<&AttentionMask>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(scores.dim());
    for (i, row) in scores.outer_iter().enumerate() {
        let mask_row = mask.map(|m| m.row(i));
        let restricted = mask_row.is_some_and(|m| m.iter().any(|b| *b));
        let allowed = |j: usize| !restricted || mask_row.is_some_and(|m| m[j]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| allowed(*j))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (j, v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                out[[i, j]] = e;
                total += e;
            }
        }
        out.row_mut(i).mapv_inplace(|e| e / total);
    }
    out
}

fn attend(
    queries: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    values: ArrayView2<'_, f64>,
    residual: &Array2<f64>,
    mask: Option<&AttentionMask>,
    w: &AttentionWeights,
) -> AttentionOutput {
    let q = queries.dot(&w.query.t());
    let k = keys.dot(&w.key.t());
    let v = values.dot(&w.value.t());
    let scale = 1.0 / (w.dim() as f64).sqrt();
    let scores = q.dot(&k.t()) * scale;
    let weights = masked_softmax(&scores, mask);
    let attended = weights.dot(&v).dot(&w.output.t());
    AttentionOutput {
        embeddings: residual + &attended,
        weights,
    }
}

/// Cross-attention from queries (`N x C`, plus positional embeddings) to the
/// locations of one feature map. Query `i` only sees locations where
/// `mask[i, ·]` is true, or every location when its mask row is empty.
pub fn masked_cross_attention(
    embeddings: &Array2<f64>,
    query_pos: &Array2<f64>,
    features: &FeatureMap,
    mask: Option<&AttentionMask>,
    w: &AttentionWeights,
) -> Result<AttentionOutput> {
    let (n, c) = embeddings.dim();
    if query_pos.dim() != (n, c) {
        return Err(Error::shape(
            "query positional embeddings",
            format!("{n}x{c}"),
            format!("{:?}", query_pos.dim()),
        ));
    }
    if features.channels() != c || w.dim() != c {
        return Err(Error::shape(
            "cross-attention channels",
            c,
            format!("features {}, weights {}", features.channels(), w.dim()),
        ));
    }
    let hw = features.height() * features.width();
    if let Some(m) = mask {
        if m.dim() != (n, hw) {
            return Err(Error::shape(
                "attention mask",
                format!("{n}x{hw}"),
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
    }
    let tokens = features.as_matrix().reversed_axes();
    let q_in = embeddings + query_pos;
    Ok(attend(q_in.view(), tokens, tokens, embeddings, mask, w))
}

/// Self-attention among the queries. Positional embeddings enter queries and
/// keys but not values.
pub fn self_attention(embeddings: &Array2<f64>, query_pos: &Array2<f64>, w: &AttentionWeights) -> AttentionOutput {
    let qk = embeddings + query_pos;
    attend(qk.view(), qk.view(), embeddings.view(), embeddings, None, w)
}

/// Parameter-free layer normalisation over each row.
pub(crate) fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let c = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / c;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one_and_respect_mask() {
        let scores = ndarray::arr2(&[[1.0, 2.0, 3.0], [0.5, -0.5, 9.0]]);
        let mask = ndarray::arr2(&[[true, false, true], [false, false, false]]);
        let p = masked_softmax(&scores, Some(&mask));
        assert_eq!(p[[0, 1]], 0.0);
        for row in p.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        // empty mask row falls back to dense
        let dense = masked_softmax(&scores, None);
        assert_eq!(p.row(1), dense.row(1));
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = ndarray::arr2(&[[1.0, 2.0, 3.0, 4.0], [10.0, -10.0, 0.0, 5.0]]);
        let y = layer_norm(&x);
        for row in y.outer_iter() {
            assert!(row.sum().abs() < 1e-12);
        }
    }
}
