//! Location-aware queries: a three-layer MLP regressing each query's
//! normalised bounding-box centre, trained with a weighted L1 loss on thing
//! segments only.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::attention::linear_init;
use crate::error::{Error, Result};
use crate::fusion::sigmoid;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaqConfig {
    /// Width of the two hidden layers; `None` uses the embedding width.
    pub hidden_dim: Option<usize>,
    pub loss_weight: f64,
}

impl Default for LaqConfig {
    fn default() -> Self {
        LaqConfig {
            hidden_dim: None,
            loss_weight: 5.0,
        }
    }
}

impl LaqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.loss_weight.is_finite() && self.loss_weight >= 0.0) {
            return Err(Error::invalid(
                "LAQ config",
                format!("loss_weight must be >= 0, got {}", self.loss_weight),
            ));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::invalid("LAQ config", "hidden_dim must be positive"));
        }
        Ok(())
    }
}

/// `C -> hidden -> hidden -> 2` with ReLU between layers and a sigmoid on the
/// output, so centres land in `[0, 1]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaqHead {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

/// Gradients of `sum(upstream ⊙ centers)` for every head parameter and the
/// input embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LaqGradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub input: Array2<f64>,
}

struct Activations {
    pre1: Array2<f64>,
    h1: Array2<f64>,
    pre2: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + &b.view().insert_axis(Axis(0))
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

impl LaqHead {
    pub fn init(embed_dim: usize, cfg: &LaqConfig, rng: &mut SeededRng) -> Self {
        let h = cfg.hidden_dim.unwrap_or(embed_dim);
        LaqHead {
            w1: linear_init(h, embed_dim, rng),
            b1: Array1::zeros(h),
            w2: linear_init(h, h, rng),
            b2: Array1::zeros(h),
            w3: linear_init(2, h, rng),
            b3: Array1::zeros(2),
        }
    }

    pub fn zeros(embed_dim: usize, hidden: usize) -> Self {
        LaqHead {
            w1: Array2::zeros((hidden, embed_dim)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, hidden)),
            b2: Array1::zeros(hidden),
            w3: Array2::zeros((2, hidden)),
            b3: Array1::zeros(2),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    fn check(&self, x: &Array2<f64>) -> Result<()> {
        let h = self.w1.nrows();
        let ok = self.b1.len() == h
            && self.w2.dim() == (h, h)
            && self.b2.len() == h
            && self.w3.dim() == (2, h)
            && self.b3.len() == 2;
        if !ok {
            return Err(Error::invalid("LAQ head", "inconsistent layer shapes"));
        }
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("LAQ head input width", self.input_dim(), x.ncols()));
        }
        Ok(())
    }

    fn activations(&self, x: &Array2<f64>) -> Activations {
        let pre1 = affine(x, &self.w1, &self.b1);
        let h1 = relu(&pre1);
        let pre2 = affine(&h1, &self.w2, &self.b2);
        let h2 = relu(&pre2);
        let out = affine(&h2, &self.w3, &self.b3).mapv(sigmoid);
        Activations {
            pre1,
            h1,
            pre2,
            h2,
            out,
        }
    }

    /// Centres `N x 2` in normalised image coordinates `(x, y)`.
    pub fn forward(&self, embeddings: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(embeddings)?;
        Ok(self.activations(embeddings).out)
    }

    pub fn backward(&self, embeddings: &Array2<f64>, upstream: &Array2<f64>) -> Result<LaqGradients> {
        self.check(embeddings)?;
        if upstream.dim() != (embeddings.nrows(), 2) {
            return Err(Error::shape(
                "LAQ upstream gradient",
                format!("{}x2", embeddings.nrows()),
                format!("{:?}", upstream.dim()),
            ));
        }
        let a = self.activations(embeddings);
        let d_pre3 = upstream * &a.out.mapv(|s| s * (1.0 - s));
        let w3 = d_pre3.t().dot(&a.h2);
        let b3 = d_pre3.sum_axis(Axis(0));
        let d_h2 = d_pre3.dot(&self.w3);
        let d_pre2 = d_h2 * &a.pre2.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let w2 = d_pre2.t().dot(&a.h1);
        let b2 = d_pre2.sum_axis(Axis(0));
        let d_h1 = d_pre2.dot(&self.w2);
        let d_pre1 = d_h1 * &a.pre1.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let w1 = d_pre1.t().dot(embeddings);
        let b1 = d_pre1.sum_axis(Axis(0));
        let input = d_pre1.dot(&self.w1);
        Ok(LaqGradients {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            input,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaqLoss {
    pub value: f64,
    /// Subgradient with respect to the predicted centres (`sign(0) = 0`).
    pub grad: Array2<f64>,
}

/// `loss_weight * mean |pred - gt|` over the thing rows and both coordinates.
/// Stuff rows contribute neither loss nor gradient; with no thing rows the
/// loss is zero.
pub fn laq_loss(pred: &Array2<f64>, gt: &Array2<f64>, is_thing: &[bool], cfg: &LaqConfig) -> Result<LaqLoss> {
    cfg.validate()?;
    let n = pred.nrows();
    if pred.ncols() != 2 || gt.dim() != pred.dim() || is_thing.len() != n {
        return Err(Error::shape(
            "LAQ loss inputs",
            format!("pred {n}x2, gt {n}x2, {n} flags"),
            format!("pred {:?}, gt {:?}, {} flags", pred.dim(), gt.dim(), is_thing.len()),
        ));
    }
    let things = is_thing.iter().filter(|t| **t).count();
    let mut grad = Array2::zeros((n, 2));
    if things == 0 {
        return Ok(LaqLoss { value: 0.0, grad });
    }
    let scale = cfg.loss_weight / (2 * things) as f64;
    let mut total = 0.0;
    for i in (0..n).filter(|&i| is_thing[i]) {
        for k in 0..2 {
            let diff = pred[[i, k]] - gt[[i, k]];
            total += diff.abs();
            grad[[i, k]] = scale
                * if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
        }
    }
    Ok(LaqLoss {
        value: scale * total,
        grad,
    })
}

/// Centre of the axis-aligned bounding box of a pixel set, normalised by the
/// image size. Pixel `(row, col)` covers `[col, col+1) x [row, row+1)`.
pub fn bbox_center(pixels: impl IntoIterator<Item = (usize, usize)>, width: usize, height: usize) -> Option<[f64; 2]> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (r, c) in pixels {
        bounds = Some(match bounds {
            None => (r, r, c, c),
            Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
        });
    }
    let (r0, r1, c0, c1) = bounds?;
    Some([
        (c0 + c1 + 1) as f64 / (2.0 * width as f64),
        (r0 + r1 + 1) as f64 / (2.0 * height as f64),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn worked_example() {
        let loss = laq_loss(
            &arr2(&[[0.2, 0.4]]),
            &arr2(&[[0.5, 0.8]]),
            &[true],
            &LaqConfig::default(),
        )
        .unwrap();
        assert!((loss.value - 1.75).abs() < 1e-12);
        assert_eq!(loss.grad, arr2(&[[-2.5, -2.5]]));
    }

    #[test]
    fn perfect_prediction_and_stuff_only() {
        let p = arr2(&[[0.1, 0.9], [0.3, 0.3]]);
        let cfg = LaqConfig::default();
        let exact = laq_loss(&p, &p, &[true, true], &cfg).unwrap();
        assert_eq!(exact.value, 0.0);
        assert!(exact.grad.iter().all(|g| *g == 0.0));
        let stuff = laq_loss(&p, &arr2(&[[0.9, 0.1], [0.0, 1.0]]), &[false, false], &cfg).unwrap();
        assert_eq!(stuff.value, 0.0);
        assert!(stuff.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn zero_head_outputs_the_image_centre() {
        let head = LaqHead::zeros(4, 3);
        let x = arr2(&[[1.0, -2.0, 3.0, 0.5], [0.0, 0.0, 0.0, 0.0]]);
        assert_eq!(head.forward(&x).unwrap(), arr2(&[[0.5, 0.5], [0.5, 0.5]]));
    }

    #[test]
    fn negative_weight_rejected() {
        let cfg = LaqConfig {
            loss_weight: -1.0,
            ..Default::default()
        };
        let p = arr2(&[[0.1, 0.9]]);
        assert!(laq_loss(&p, &p, &[true], &cfg).is_err());
    }

    #[test]
    fn bbox_centres() {
        assert_eq!(bbox_center([(0, 0)], 4, 2), Some([0.125, 0.25]));
        assert_eq!(bbox_center([(0, 0), (1, 3)], 4, 2), Some([0.5, 0.5]));
        assert_eq!(bbox_center(std::iter::empty(), 4, 2), None);
    }
}
