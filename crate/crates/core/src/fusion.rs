//! Gated fusion of image and depth feature maps.
//!
//! For every spatial location the image features drive a 1x1 convolution
//! whose sigmoid decides how much of the (γ-scaled) depth features to add:
//!
//! ```text
//! out = F_I + sigmoid(W · F_I + b) ⊙ (γ ⊙ F_D)
//! ```
//!
//! `W` maps the `C_I` image channels to the `C_D` depth channels. The output
//! always has the image's shape; when `C_D != C_I` the depth term is
//! truncated to the first `C_I` channels or zero-padded up to them.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// One level of a multi-scale feature pyramid, laid out as `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    scale: u8,
    data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(scale: u8, data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "feature map",
                format!("dimensions must be positive, got {c}x{h}x{w}"),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map", "values must be finite"));
        }
        Ok(FeatureMap { scale, data })
    }

    pub fn zeros(scale: u8, channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            scale,
            data: Array3::zeros((channels, height, width)),
        }
    }

    /// Uniform random values in `[-1, 1)`.
    pub fn random(scale: u8, channels: usize, height: usize, width: usize, rng: &mut SeededRng) -> Self {
        let data = Array3::from_shape_simple_fn((channels, height, width), || rng.uniform(-1.0, 1.0));
        FeatureMap { scale, data }
    }

    pub fn scale(&self) -> u8 {
        self.scale
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Channels by flattened pixels, `[C, H*W]`.
    pub fn as_matrix(&self) -> ArrayView2<'_, f64> {
        let (c, h, w) = self.data.dim();
        self.data
            .view()
            .into_shape_with_order((c, h * w))
            .expect("feature maps are stored contiguously")
    }

    fn dims(&self) -> String {
        format!("{}x{}x{}", self.channels(), self.height(), self.width())
    }
}

/// Learned parameters of one fusion level.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `C_D x C_I` weights of the 1x1 gate convolution.
    pub gate_weights: Array2<f64>,
    pub gate_bias: Array1<f64>,
    pub gamma: Array1<f64>,
}

impl FusionParams {
    pub fn new(gate_weights: Array2<f64>, gate_bias: Array1<f64>, gamma: Array1<f64>) -> Result<Self> {
        let c_d = gate_weights.nrows();
        if gate_bias.len() != c_d || gamma.len() != c_d {
            return Err(Error::shape(
                "fusion params",
                format!("bias and gamma of length {c_d}"),
                format!("bias {}, gamma {}", gate_bias.len(), gamma.len()),
            ));
        }
        if gate_weights.ncols() == 0 || c_d == 0 {
            return Err(Error::invalid("fusion params", "gate weights must be non-empty"));
        }
        let all = gate_weights.iter().chain(&gate_bias).chain(&gamma);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("fusion params", "values must be finite"));
        }
        Ok(FusionParams {
            gate_weights,
            gate_bias,
            gamma,
        })
    }

    /// Starting point before training: uniform gate weights in
    /// `±1/sqrt(C_I)`, zero bias, `γ = 1`.
    pub fn initial(image_channels: usize, depth_channels: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let bound = 1.0 / (image_channels as f64).sqrt();
        FusionParams {
            gate_weights: Array2::from_shape_simple_fn((depth_channels, image_channels), || rng.uniform(-bound, bound)),
            gate_bias: Array1::zeros(depth_channels),
            gamma: Array1::ones(depth_channels),
        }
    }

    pub fn image_channels(&self) -> usize {
        self.gate_weights.ncols()
    }

    pub fn depth_channels(&self) -> usize {
        self.gate_weights.nrows()
    }
}

/// JSON form of [`FusionParams`]: nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionParamsDoc {
    pub gate_weights: Vec<Vec<f64>>,
    pub gate_bias: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl TryFrom<FusionParamsDoc> for FusionParams {
    type Error = Error;

    fn try_from(doc: FusionParamsDoc) -> Result<Self> {
        let rows = doc.gate_weights.len();
        let cols = doc.gate_weights.first().map_or(0, Vec::len);
        if doc.gate_weights.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("fusion params", "gate_weights rows differ in length"));
        }
        let flat: Vec<f64> = doc.gate_weights.into_iter().flatten().collect();
        let w =
            Array2::from_shape_vec((rows, cols), flat).map_err(|e| Error::invalid("fusion params", e.to_string()))?;
        FusionParams::new(w, Array1::from(doc.gate_bias), Array1::from(doc.gamma))
    }
}

impl From<&FusionParams> for FusionParamsDoc {
    fn from(p: &FusionParams) -> Self {
        FusionParamsDoc {
            gate_weights: p.gate_weights.outer_iter().map(|r| r.to_vec()).collect(),
            gate_bias: p.gate_bias.to_vec(),
            gamma: p.gamma.to_vec(),
        }
    }
}

/// Feature combination used at every level.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionMode {
    /// Image-conditioned gating of the depth features.
    DynamicWeighting(FusionParams),
    /// Plain elementwise addition, the ablation baseline.
    Sum,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_pair(image: &FeatureMap, depth: &FeatureMap) -> Result<()> {
    if image.height() != depth.height() || image.width() != depth.width() {
        return Err(Error::shape(
            "fusion spatial dims",
            format!("{}x{}", image.height(), image.width()),
            format!("{}x{}", depth.height(), depth.width()),
        ));
    }
    Ok(())
}

fn check_params(image: &FeatureMap, depth: &FeatureMap, p: &FusionParams) -> Result<()> {
    check_pair(image, depth)?;
    if p.image_channels() != image.channels() || p.depth_channels() != depth.channels() {
        return Err(Error::shape(
            "fusion params vs features",
            format!("C_D x C_I = {}x{}", depth.channels(), image.channels()),
            format!("{}x{}", p.depth_channels(), p.image_channels()),
        ));
    }
    Ok(())
}

/// Pre-activation gate `W · F_I + b`, shaped `[C_D, H*W]`.
fn gate_logits(image: &FeatureMap, p: &FusionParams) -> Array2<f64> {
    let mut g = p.gate_weights.dot(&image.as_matrix());
    g += &p.gate_bias.view().insert_axis(Axis(1));
    g
}

/// Gated fusion of one level.
pub fn fuse_features(image: &FeatureMap, depth: &FeatureMap, p: &FusionParams) -> Result<FeatureMap> {
    check_params(image, depth, p)?;
    let gate = gate_logits(image, p).mapv(sigmoid);
    let depth_m = depth.as_matrix();
    let mut out = image.data.clone();
    let shared = image.channels().min(depth.channels());
    let hw = image.height() * image.width();
    let out_flat = out.as_slice_mut().expect("contiguous");
    for c in 0..shared {
        let gamma = p.gamma[c];
        let row = &mut out_flat[c * hw..(c + 1) * hw];
        for (i, o) in row.iter_mut().enumerate() {
            *o += gate[[c, i]] * (gamma * depth_m[[c, i]]);
        }
    }
    FeatureMap::new(image.scale, out)
}

/// Summation baseline: `F_I + F_D` with the same channel alignment as the
/// gated mode.
pub fn fuse_sum(image: &FeatureMap, depth: &FeatureMap) -> Result<FeatureMap> {
    check_pair(image, depth)?;
    let mut out = image.data.clone();
    let shared = image.channels().min(depth.channels());
    for c in 0..shared {
        let mut dst = out.index_axis_mut(Axis(0), c);
        dst += &depth.data.index_axis(Axis(0), c);
    }
    FeatureMap::new(image.scale, out)
}

pub fn fuse(image: &FeatureMap, depth: &FeatureMap, mode: &FusionMode) -> Result<FeatureMap> {
    match mode {
        FusionMode::DynamicWeighting(p) => fuse_features(image, depth, p),
        FusionMode::Sum => fuse_sum(image, depth),
    }
}

/// Gradients of `sum(upstream ⊙ fuse_features(F_I, F_D, p))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGradients {
    pub image: Array3<f64>,
    pub depth: Array3<f64>,
    pub gate_weights: Array2<f64>,
    pub gate_bias: Array1<f64>,
    pub gamma: Array1<f64>,
}

pub fn fuse_backward(
    image: &FeatureMap,
    depth: &FeatureMap,
    p: &FusionParams,
    upstream: &FeatureMap,
) -> Result<FusionGradients> {
    check_params(image, depth, p)?;
    if upstream.data.dim() != image.data.dim() {
        return Err(Error::shape("fusion upstream gradient", image.dims(), upstream.dims()));
    }
    let (c_i, c_d) = (image.channels(), depth.channels());
    let (h, w) = (image.height(), image.width());
    let hw = h * w;
    let shared = c_i.min(c_d);

    let gate = gate_logits(image, p).mapv(sigmoid);
    let depth_m = depth.as_matrix();
    let up = upstream.as_matrix();

    let mut d_depth = Array2::<f64>::zeros((c_d, hw));
    let mut d_gamma = Array1::<f64>::zeros(c_d);
    // Gradient w.r.t. the gate pre-activation.
    let mut d_logits = Array2::<f64>::zeros((c_d, hw));
    for c in 0..shared {
        let gamma = p.gamma[c];
        let mut acc = 0.0;
        for i in 0..hw {
            let (u, s, fd) = (up[[c, i]], gate[[c, i]], depth_m[[c, i]]);
            d_depth[[c, i]] = u * s * gamma;
            acc += u * s * fd;
            d_logits[[c, i]] = u * gamma * fd * s * (1.0 - s);
        }
        d_gamma[c] = acc;
    }

    let d_weights = d_logits.dot(&image.as_matrix().t());
    let d_bias = d_logits.sum_axis(Axis(1));
    let d_image = &up + &p.gate_weights.t().dot(&d_logits);

    let to3 = |m: Array2<f64>, c: usize| {
        m.into_shape_with_order((c, h, w))
            .expect("gradient buffers are contiguous")
    };
    Ok(FusionGradients {
        image: to3(d_image, c_i),
        depth: to3(d_depth, c_d),
        gate_weights: d_weights,
        gate_bias: d_bias,
        gamma: d_gamma,
    })
}

/// Applies the fusion independently at every pyramid level.
pub fn multi_scale_fuse(images: &[FeatureMap], depths: &[FeatureMap], modes: &[FusionMode]) -> Result<Vec<FeatureMap>> {
    if images.is_empty() || images.len() != depths.len() || images.len() != modes.len() {
        return Err(Error::shape(
            "multi-scale fusion levels",
            format!("{} image levels matched by depth and params", images.len()),
            format!("{} depth, {} params", depths.len(), modes.len()),
        ));
    }
    images
        .iter()
        .zip(depths)
        .zip(modes)
        .map(|((fi, fd), mode)| {
            if fi.scale() != fd.scale() {
                return Err(Error::shape("multi-scale fusion scale index", fi.scale(), fd.scale()));
            }
            fuse(fi, fd, mode)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn random_params(c_i: usize, c_d: usize, rng: &mut SeededRng) -> FusionParams {
        FusionParams::new(
            Array2::from_shape_simple_fn((c_d, c_i), || rng.uniform(-1.0, 1.0)),
            Array1::from_shape_simple_fn(c_d, || rng.uniform(-0.5, 0.5)),
            Array1::from_shape_simple_fn(c_d, || rng.uniform(-2.0, 2.0)),
        )
        .unwrap()
    }

    #[test]
    fn zero_gamma_is_identity() {
        let mut rng = SeededRng::new(1);
        let fi = FeatureMap::random(1, 3, 4, 5, &mut rng);
        let fd = FeatureMap::random(1, 3, 4, 5, &mut rng);
        let mut p = random_params(3, 3, &mut rng);
        p.gamma.fill(0.0);
        assert_eq!(fuse_features(&fi, &fd, &p).unwrap(), fi);
    }

    #[test]
    fn zero_gate_halves_the_depth_term() {
        let mut rng = SeededRng::new(2);
        let fi = FeatureMap::random(2, 3, 2, 2, &mut rng);
        let fd = FeatureMap::random(2, 3, 2, 2, &mut rng);
        let mut p = random_params(3, 3, &mut rng);
        p.gate_weights.fill(0.0);
        p.gate_bias.fill(0.0);
        let out = fuse_features(&fi, &fd, &p).unwrap();
        for ((c, y, x), v) in out.data().indexed_iter() {
            let expect = fi.data()[[c, y, x]] + 0.5 * p.gamma[c] * fd.data()[[c, y, x]];
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_mode_is_elementwise_addition() {
        let mut rng = SeededRng::new(3);
        let fi = FeatureMap::random(1, 4, 3, 3, &mut rng);
        let fd = FeatureMap::random(1, 4, 3, 3, &mut rng);
        let out = fuse_sum(&fi, &fd).unwrap();
        assert_eq!(out.data(), &(fi.data() + fd.data()));
    }

    #[test]
    fn channel_alignment_pads_and_truncates() {
        let mut rng = SeededRng::new(4);
        let fi = FeatureMap::random(1, 4, 2, 2, &mut rng);
        let fd = FeatureMap::random(1, 2, 2, 2, &mut rng);
        let p = random_params(4, 2, &mut rng);
        let out = fuse_features(&fi, &fd, &p).unwrap();
        assert_eq!(out.channels(), 4);
        // Channels beyond C_D receive no depth contribution.
        assert_eq!(out.data().index_axis(Axis(0), 3), fi.data().index_axis(Axis(0), 3));

        let fd_wide = FeatureMap::random(1, 6, 2, 2, &mut rng);
        let p_wide = random_params(4, 6, &mut rng);
        assert_eq!(fuse_features(&fi, &fd_wide, &p_wide).unwrap().channels(), 4);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let fi = FeatureMap::zeros(1, 2, 3, 3);
        let fd = FeatureMap::zeros(1, 2, 3, 4);
        let p = FusionParams::initial(2, 2, 0);
        let err = fuse_features(&fi, &fd, &p).unwrap_err().to_string();
        assert!(err.contains("3x3") && err.contains("3x4"), "{err}");
        let fd = FeatureMap::zeros(1, 3, 3, 3);
        assert!(fuse_features(&fi, &fd, &p).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = SeededRng::new(5);
        let fi = FeatureMap::random(1, 2, 3, 3, &mut rng);
        let fd = FeatureMap::random(1, 2, 3, 3, &mut rng);
        let p = random_params(2, 2, &mut rng);
        let g = fuse_backward(&fi, &fd, &p, &FeatureMap::zeros(1, 2, 3, 3)).unwrap();
        assert!(g.image.iter().chain(&g.depth).all(|v| *v == 0.0));
        assert!(g
            .gate_weights
            .iter()
            .chain(&g.gate_bias)
            .chain(&g.gamma)
            .all(|v| *v == 0.0));
    }

    #[test]
    fn gamma_gradient_on_constant_inputs() {
        let (h, w) = (3, 4);
        let fi = FeatureMap::new(1, Array3::from_shape_fn((2, h, w), |(c, _, _)| 0.3 + c as f64)).unwrap();
        let fd = FeatureMap::new(1, Array3::from_shape_fn((2, h, w), |(c, _, _)| -1.2 + 2.0 * c as f64)).unwrap();
        let up = FeatureMap::new(1, Array3::from_shape_fn((2, h, w), |(c, _, _)| 0.7 - c as f64)).unwrap();
        let p = FusionParams::new(
            ndarray::arr2(&[[0.4, -0.2], [0.1, 0.9]]),
            ndarray::arr1(&[0.05, -0.3]),
            ndarray::arr1(&[1.5, -0.5]),
        )
        .unwrap();
        let grads = fuse_backward(&fi, &fd, &p, &up).unwrap();
        for c in 0..2 {
            let fi_v: Vec<f64> = (0..2).map(|k| fi.data()[[k, 0, 0]]).collect();
            let logit = p.gate_weights[[c, 0]] * fi_v[0] + p.gate_weights[[c, 1]] * fi_v[1] + p.gate_bias[c];
            let expect = (h * w) as f64 * sigmoid(logit) * fd.data()[[c, 0, 0]] * up.data()[[c, 0, 0]];
            assert!((grads.gamma[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn params_json_round_trip() {
        let p = FusionParams::initial(3, 2, 9);
        let doc = FusionParamsDoc::from(&p);
        let back: FusionParams = serde_json::from_str::<FusionParamsDoc>(&serde_json::to_string(&doc).unwrap())
            .unwrap()
            .try_into()
            .unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn multi_scale_requires_aligned_levels() {
        let fi = vec![FeatureMap::zeros(1, 2, 2, 2), FeatureMap::zeros(2, 2, 1, 1)];
        let fd = vec![FeatureMap::zeros(1, 2, 2, 2)];
        assert!(multi_scale_fuse(&fi, &fd, &[FusionMode::Sum, FusionMode::Sum]).is_err());
        let fd = vec![FeatureMap::zeros(1, 2, 2, 2), FeatureMap::zeros(3, 2, 1, 1)];
        assert!(multi_scale_fuse(&fi, &fd, &[FusionMode::Sum, FusionMode::Sum]).is_err());
    }
}
