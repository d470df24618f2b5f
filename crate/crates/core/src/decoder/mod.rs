//! Toy masked-attention query decoder.
//!
//! Each layer runs masked cross-attention against one feature level, then
//! self-attention among the queries, then a two-layer feed-forward block;
//! every sub-block is residual and followed by a parameter-free layer norm.
//! Attention masks come from the mask head applied to the current queries.
//! After the last layer a linear class head (K classes plus "no object"), the
//! mask head and the location head produce the outputs.
//!
//! Feature levels: the largest map feeds the mask head. Cross-attention
//! cycles through the remaining levels from coarsest to finest, one level
//! per layer; with a single level that level is used throughout.

pub mod attention;
pub mod laq;

pub use attention::{masked_cross_attention, self_attention, AttentionMask, AttentionOutput, AttentionWeights};
pub use laq::{bbox_center, laq_loss, LaqConfig, LaqGradients, LaqHead, LaqLoss};

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{sigmoid, FeatureMap};
use crate::rng::SeededRng;
use attention::{layer_norm, linear_init};

/// A set of `N` object queries and whatever heads have been evaluated on them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    /// `N x C` query embeddings.
    pub embeddings: Array2<f64>,
    /// `N x (K+1)` class logits; the last column is "no object".
    pub class_logits: Option<Array2<f64>>,
    /// `N x 2` normalised `(x, y)` centres.
    pub centers: Option<Array2<f64>>,
    /// `N x H x W` mask logits at the mask-feature resolution.
    pub mask_logits: Option<Array3<f64>>,
}

impl QuerySet {
    pub fn from_embeddings(embeddings: Array2<f64>) -> Self {
        QuerySet {
            embeddings,
            class_logits: None,
            centers: None,
            mask_logits: None,
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Number of real classes `K`, when class logits are present.
    pub fn num_classes(&self) -> Option<usize> {
        self.class_logits.as_ref().map(|l| l.ncols() - 1)
    }

    /// Row-wise softmax of the class logits.
    pub fn class_probs(&self) -> Option<Array2<f64>> {
        let logits = self.class_logits.as_ref()?;
        let mut p = logits.clone();
        for mut row in p.axis_iter_mut(Axis(0)) {
            let max = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row.mapv_inplace(|v| v / total);
        }
        Some(p)
    }

    /// Argmax class per query (first index on ties).
    pub fn predicted_classes(&self) -> Option<Vec<usize>> {
        let logits = self.class_logits.as_ref()?;
        Some(
            logits
                .outer_iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold(
                            (0, f64::NEG_INFINITY),
                            |best, (j, v)| if *v > best.1 { (j, *v) } else { best },
                        )
                        .0
                })
                .collect(),
        )
    }

    /// A query is non-empty when its argmax class is not "no object".
    pub fn non_empty_flags(&self) -> Option<Vec<bool>> {
        let k = self.num_classes()?;
        Some(self.predicted_classes()?.into_iter().map(|c| c != k).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if has_nan(&self.embeddings) {
            return Err(Error::invalid("query set", "embeddings contain NaN"));
        }
        if let Some(l) = &self.class_logits {
            if l.nrows() != n || l.ncols() < 2 {
                return Err(Error::shape(
                    "class logits",
                    format!("{n}x(K+1), K >= 1"),
                    format!("{:?}", l.dim()),
                ));
            }
            if has_nan(l) {
                return Err(Error::invalid("query set", "class logits contain NaN"));
            }
        }
        if let Some(c) = &self.centers {
            if c.dim() != (n, 2) {
                return Err(Error::shape("centers", format!("{n}x2"), format!("{:?}", c.dim())));
            }
            if has_nan(c) {
                return Err(Error::invalid("query set", "centers contain NaN"));
            }
        }
        if let Some(m) = &self.mask_logits {
            if m.dim().0 != n {
                return Err(Error::shape("mask logits", n, m.dim().0));
            }
            if has_nan(m) {
                return Err(Error::invalid("query set", "mask logits contain NaN"));
            }
        }
        Ok(())
    }
}

fn has_nan<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().any(|v| v.is_nan())
}

/// Time-aware query selection: slot `i` keeps the previous frame's output
/// embedding when that query was non-empty and otherwise falls back to the
/// learned initial embedding. Slot order is preserved.
pub fn taq_select(prev_out: &QuerySet, learned_init: &QuerySet) -> Result<QuerySet> {
    if prev_out.embeddings.dim() != learned_init.embeddings.dim() {
        return Err(Error::shape(
            "TAQ query sets",
            format!("{:?}", learned_init.embeddings.dim()),
            format!("{:?}", prev_out.embeddings.dim()),
        ));
    }
    let flags = prev_out
        .non_empty_flags()
        .ok_or_else(|| Error::invalid("TAQ", "previous frame has no class logits"))?;
    let mut embeddings = learned_init.embeddings.clone();
    for (i, keep) in flags.into_iter().enumerate() {
        if keep {
            embeddings.row_mut(i).assign(&prev_out.embeddings.row(i));
        }
    }
    Ok(QuerySet::from_embeddings(embeddings))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub num_queries: usize,
    pub embed_dim: usize,
    /// Real classes `K`; the class head has `K + 1` outputs.
    pub num_classes: usize,
    pub ffn_dim: usize,
    /// Sigmoid threshold defining a query's attention region.
    pub mask_threshold: f64,
    pub self_attention: bool,
    pub laq: LaqConfig,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 3,
            num_queries: 8,
            embed_dim: 16,
            num_classes: 4,
            ffn_dim: 32,
            mask_threshold: 0.5,
            self_attention: true,
            laq: LaqConfig::default(),
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::invalid("decoder config", "layers must be >= 1"));
        }
        if self.num_queries == 0 || self.embed_dim == 0 || self.num_classes == 0 || self.ffn_dim == 0 {
            return Err(Error::invalid(
                "decoder config",
                "num_queries, embed_dim, num_classes and ffn_dim must be positive",
            ));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::invalid("decoder config", "mask_threshold must lie in (0, 1)"));
        }
        self.laq.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub cross: AttentionWeights,
    pub self_attn: AttentionWeights,
    pub ffn_in: Array2<f64>,
    pub ffn_in_bias: Array1<f64>,
    pub ffn_out: Array2<f64>,
    pub ffn_out_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    /// Learned initial queries.
    pub query_init: Array2<f64>,
    /// Learned per-slot positional embeddings, never replaced by TAQ.
    pub query_pos: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub class_head: Array2<f64>,
    pub class_bias: Array1<f64>,
    /// Three `C x C` layers producing the per-query mask filter.
    pub mask_mlp: [(Array2<f64>, Array1<f64>); 3],
    pub laq: LaqHead,
}

impl DecoderWeights {
    /// Deterministic initialisation from `cfg.seed`.
    pub fn init(cfg: &DecoderConfig) -> Self {
        let mut rng = SeededRng::new(cfg.seed);
        let (n, c) = (cfg.num_queries, cfg.embed_dim);
        let query_init = Array2::from_shape_simple_fn((n, c), || rng.uniform(-1.0, 1.0));
        let query_pos = Array2::from_shape_simple_fn((n, c), || rng.uniform(-1.0, 1.0));
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                cross: AttentionWeights::init(c, &mut rng),
                self_attn: AttentionWeights::init(c, &mut rng),
                ffn_in: linear_init(cfg.ffn_dim, c, &mut rng),
                ffn_in_bias: Array1::zeros(cfg.ffn_dim),
                ffn_out: linear_init(c, cfg.ffn_dim, &mut rng),
                ffn_out_bias: Array1::zeros(c),
            })
            .collect();
        let class_head = linear_init(cfg.num_classes + 1, c, &mut rng);
        let class_bias = Array1::zeros(cfg.num_classes + 1);
        let mut mlp_layer = || (linear_init(c, c, &mut rng), Array1::zeros(c));
        let mask_mlp = [mlp_layer(), mlp_layer(), mlp_layer()];
        let laq = LaqHead::init(c, &cfg.laq, &mut rng);
        DecoderWeights {
            query_init,
            query_pos,
            layers,
            class_head,
            class_bias,
            mask_mlp,
            laq,
        }
    }
}

/// Decoder configuration bundled with its weights.
#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    weights: DecoderWeights,
}

/// One decoded frame of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFrame {
    pub initial: QuerySet,
    pub output: QuerySet,
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + &b.view().insert_axis(Axis(0))
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = DecoderWeights::init(&cfg);
        Ok(Decoder { cfg, weights })
    }

    pub fn with_weights(cfg: DecoderConfig, weights: DecoderWeights) -> Result<Self> {
        cfg.validate()?;
        if weights.layers.len() != cfg.layers
            || weights.query_init.dim() != (cfg.num_queries, cfg.embed_dim)
            || weights.class_head.dim() != (cfg.num_classes + 1, cfg.embed_dim)
        {
            return Err(Error::invalid("decoder weights", "shapes disagree with the config"));
        }
        Ok(Decoder { cfg, weights })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &DecoderWeights {
        &self.weights
    }

    /// The learned initial queries.
    pub fn initial_queries(&self) -> QuerySet {
        QuerySet::from_embeddings(self.weights.query_init.clone())
    }

    fn mask_filters(&self, x: &Array2<f64>) -> Array2<f64> {
        let [(w1, b1), (w2, b2), (w3, b3)] = &self.weights.mask_mlp;
        let h = linear(x, w1, b1).mapv(|v| v.max(0.0));
        let h = linear(&h, w2, b2).mapv(|v| v.max(0.0));
        linear(&h, w3, b3)
    }

    /// Mask logits `N x H x W`: each query's filter dotted with the mask
    /// features at every pixel.
    pub fn predict_masks(&self, x: &Array2<f64>, mask_features: &FeatureMap) -> Array3<f64> {
        let filters = self.mask_filters(x);
        let logits = filters.dot(&mask_features.as_matrix());
        logits
            .into_shape_with_order((x.nrows(), mask_features.height(), mask_features.width()))
            .expect("contiguous")
    }

    /// Attention mask at the resolution of `target`, sampled nearest from
    /// the mask logits.
    fn attention_mask(&self, masks: &Array3<f64>, target: &FeatureMap) -> AttentionMask {
        let (n, mh, mw) = masks.dim();
        let (th, tw) = (target.height(), target.width());
        let thr = self.cfg.mask_threshold;
        Array2::from_shape_fn((n, th * tw), |(i, p)| {
            let (y, x) = (p / tw, p % tw);
            let sy = (y * mh / th).min(mh - 1);
            let sx = (x * mw / tw).min(mw - 1);
            sigmoid(masks[[i, sy, sx]]) > thr
        })
    }

    /// Index of the mask-feature level and the cross-attention cycle.
    fn plan_levels(features: &[FeatureMap]) -> (usize, Vec<usize>) {
        let area = |f: &FeatureMap| f.height() * f.width();
        let mut mask_level = 0;
        for (i, f) in features.iter().enumerate() {
            if area(f) > area(&features[mask_level]) {
                mask_level = i;
            }
        }
        let mut cycle: Vec<usize> = (0..features.len())
            .filter(|&i| features.len() == 1 || i != mask_level)
            .collect();
        cycle.sort_by_key(|&i| area(&features[i]));
        (mask_level, cycle)
    }

    /// Runs every layer and all output heads.
    pub fn run(&self, initial: &QuerySet, features: &[FeatureMap]) -> Result<QuerySet> {
        if features.is_empty() {
            return Err(Error::invalid("decoder", "feature list is empty"));
        }
        let (n, c) = (self.cfg.num_queries, self.cfg.embed_dim);
        if initial.embeddings.dim() != (n, c) {
            return Err(Error::shape(
                "decoder initial queries",
                format!("{n}x{c}"),
                format!("{:?}", initial.embeddings.dim()),
            ));
        }
        if let Some(f) = features.iter().find(|f| f.channels() != c) {
            return Err(Error::shape("decoder feature channels", c, f.channels()));
        }
        let (mask_level, cycle) = Self::plan_levels(features);
        let mask_features = &features[mask_level];
        let pos = &self.weights.query_pos;

        let mut x = initial.embeddings.clone();
        for (l, layer) in self.weights.layers.iter().enumerate() {
            let level = &features[cycle[l % cycle.len()]];
            let masks = self.predict_masks(&layer_norm(&x), mask_features);
            let attn_mask = self.attention_mask(&masks, level);
            x = layer_norm(&masked_cross_attention(&x, pos, level, Some(&attn_mask), &layer.cross)?.embeddings);
            if self.cfg.self_attention {
                x = layer_norm(&self_attention(&x, pos, &layer.self_attn).embeddings);
            }
            let hidden = linear(&x, &layer.ffn_in, &layer.ffn_in_bias).mapv(|v| v.max(0.0));
            x = layer_norm(&(&x + &linear(&hidden, &layer.ffn_out, &layer.ffn_out_bias)));
        }

        let class_logits = linear(&x, &self.weights.class_head, &self.weights.class_bias);
        let mask_logits = self.predict_masks(&x, mask_features);
        let centers = self.weights.laq.forward(&x)?;
        let out = QuerySet {
            embeddings: x,
            class_logits: Some(class_logits),
            centers: Some(centers),
            mask_logits: Some(mask_logits),
        };
        out.validate()?;
        Ok(out)
    }

    /// Decodes frames in order. With `taq` set, frame `t > 0` starts from
    /// [`taq_select`] of frame `t - 1`'s output; otherwise every frame starts
    /// from the learned initial queries.
    pub fn decode_sequence(&self, frames: &[Vec<FeatureMap>], taq: bool) -> Result<Vec<DecodedFrame>> {
        let learned = self.initial_queries();
        let mut decoded: Vec<DecodedFrame> = Vec::with_capacity(frames.len());
        for features in frames {
            let initial = match decoded.last() {
                Some(prev) if taq => taq_select(&prev.output, &learned)?,
                _ => learned.clone(),
            };
            let output = self.run(&initial, features)?;
            decoded.push(DecodedFrame { initial, output });
        }
        Ok(decoded)
    }
}
