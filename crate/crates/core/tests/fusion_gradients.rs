use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use pvkit_core::fusion::{
    fuse_backward, fuse_features, fuse_sum, multi_scale_fuse, FeatureMap, FusionMode, FusionParams,
};
use pvkit_core::rng::SeededRng;

fn random_map(rng: &mut SeededRng, scale: u8, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(
        scale,
        Array3::from_shape_simple_fn((c, h, w), || rng.uniform(-2.0, 2.0)),
    )
    .unwrap()
}

fn random_params(rng: &mut SeededRng, c_i: usize, c_d: usize) -> FusionParams {
    FusionParams::new(
        Array2::from_shape_simple_fn((c_d, c_i), || rng.uniform(-1.0, 1.0)),
        Array1::from_shape_simple_fn(c_d, || rng.uniform(-1.0, 1.0)),
        Array1::from_shape_simple_fn(c_d, || rng.uniform(-1.5, 1.5)),
    )
    .unwrap()
}

/// Scalar triple loop over channels, rows and columns.
fn reference_fuse(fi: &Array3<f64>, fd: &Array3<f64>, p: &FusionParams) -> Array3<f64> {
    let (c_i, h, w) = fi.dim();
    let c_d = fd.dim().0;
    let mut out = fi.clone();
    for c in 0..c_i.min(c_d) {
        for y in 0..h {
            for x in 0..w {
                let mut g = p.gate_bias[c];
                for k in 0..c_i {
                    g += p.gate_weights[[c, k]] * fi[[k, y, x]];
                }
                let s = 1.0 / (1.0 + (-g).exp());
                out[[c, y, x]] = fi[[c, y, x]] + s * p.gamma[c] * fd[[c, y, x]];
            }
        }
    }
    out
}

#[test]
fn matches_scalar_reference() {
    let mut rng = SeededRng::new(7);
    for (c_i, c_d) in [(4, 4), (4, 3), (3, 5)] {
        let fi = random_map(&mut rng, 1, c_i, 3, 3);
        let fd = random_map(&mut rng, 1, c_d, 3, 3);
        let p = random_params(&mut rng, c_i, c_d);
        let out = fuse_features(&fi, &fd, &p).unwrap();
        let expected = reference_fuse(fi.data(), fd.data(), &p);
        assert_eq!(out.data().dim(), fi.data().dim());
        for (a, b) in out.data().iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

fn loss(fi: &FeatureMap, fd: &FeatureMap, p: &FusionParams, up: &FeatureMap) -> f64 {
    let out = fuse_features(fi, fd, p).unwrap();
    (out.data() * up.data()).sum()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Central differences with h = 1e-6 on every input and parameter.
fn check_gradients(seed: u64) -> f64 {
    const H: f64 = 1e-6;
    let mut rng = SeededRng::new(seed);
    let fi = random_map(&mut rng, 1, 2, 4, 4);
    let fd = random_map(&mut rng, 1, 2, 4, 4);
    let p = random_params(&mut rng, 2, 2);
    let up = random_map(&mut rng, 1, 2, 4, 4);
    let g = fuse_backward(&fi, &fd, &p, &up).unwrap();
    let mut worst: f64 = 0.0;

    let mut probe = |analytic: f64, f: &dyn Fn(f64) -> f64| {
        let numeric = (f(H) - f(-H)) / (2.0 * H);
        worst = worst.max(rel_err(analytic, numeric));
    };
    for idx in ndarray::indices((2, 4, 4)) {
        let (c, y, x) = idx;
        probe(g.image[[c, y, x]], &|h| {
            let mut m = fi.clone();
            m.data_mut()[[c, y, x]] += h;
            loss(&m, &fd, &p, &up)
        });
        probe(g.depth[[c, y, x]], &|h| {
            let mut m = fd.clone();
            m.data_mut()[[c, y, x]] += h;
            loss(&fi, &m, &p, &up)
        });
    }
    for (r, k) in ndarray::indices((2, 2)) {
        probe(g.gate_weights[[r, k]], &|h| {
            let mut q = p.clone();
            q.gate_weights[[r, k]] += h;
            loss(&fi, &fd, &q, &up)
        });
    }
    for c in 0..2 {
        probe(g.gate_bias[c], &|h| {
            let mut q = p.clone();
            q.gate_bias[c] += h;
            loss(&fi, &fd, &q, &up)
        });
        probe(g.gamma[c], &|h| {
            let mut q = p.clone();
            q.gamma[c] += h;
            loss(&fi, &fd, &q, &up)
        });
    }
    worst
}

#[test]
fn gradients_match_central_differences() {
    for seed in 0..20 {
        let worst = check_gradients(seed);
        assert!(worst < 1e-6, "seed {seed}: relative error {worst:e}");
    }
}

#[test]
fn gamma_gradient_on_constant_inputs() {
    let (h, w) = (3, 5);
    let fi = FeatureMap::new(1, Array3::from_shape_fn((2, h, w), |(c, _, _)| [0.3, -0.8][c])).unwrap();
    let fd = FeatureMap::new(1, Array3::from_shape_fn((2, h, w), |(c, _, _)| [1.7, 2.2][c])).unwrap();
    let up = FeatureMap::new(1, Array3::from_shape_fn((2, h, w), |(c, _, _)| [0.5, -1.25][c])).unwrap();
    let p = FusionParams::new(
        ndarray::arr2(&[[0.4, -0.1], [0.9, 0.2]]),
        ndarray::arr1(&[0.05, -0.3]),
        ndarray::arr1(&[1.0, 0.5]),
    )
    .unwrap();
    let g = fuse_backward(&fi, &fd, &p, &up).unwrap();
    for c in 0..2 {
        let logit = p.gate_bias[c] + p.gate_weights[[c, 0]] * 0.3 + p.gate_weights[[c, 1]] * -0.8;
        let s = 1.0 / (1.0 + (-logit).exp());
        let expected = (h * w) as f64 * s * fd.data()[[c, 0, 0]] * up.data()[[c, 0, 0]];
        assert!((g.gamma[c] - expected).abs() < 1e-12);
    }
}

#[test]
fn zero_gamma_is_identity_on_every_scale() {
    let mut rng = SeededRng::new(3);
    let dims = [(8, 8), (4, 4), (2, 2), (1, 1)];
    let fi: Vec<FeatureMap> = dims
        .iter()
        .enumerate()
        .map(|(l, &(h, w))| random_map(&mut rng, l as u8 + 1, 3, h, w))
        .collect();
    let fd: Vec<FeatureMap> = dims
        .iter()
        .enumerate()
        .map(|(l, &(h, w))| random_map(&mut rng, l as u8 + 1, 3, h, w))
        .collect();
    let modes: Vec<FusionMode> = (0..4)
        .map(|_| {
            let mut p = random_params(&mut rng, 3, 3);
            p.gamma.fill(0.0);
            FusionMode::DynamicWeighting(p)
        })
        .collect();
    let out = multi_scale_fuse(&fi, &fd, &modes).unwrap();
    for (o, i) in out.iter().zip(&fi) {
        assert_eq!(o, i);
    }
}

#[test]
fn scales_are_independent_of_order() {
    let mut rng = SeededRng::new(11);
    let dims = [(8, 6), (4, 3), (2, 2), (1, 1)];
    let fi: Vec<FeatureMap> = dims
        .iter()
        .enumerate()
        .map(|(l, &(h, w))| random_map(&mut rng, l as u8 + 1, 4, h, w))
        .collect();
    let fd: Vec<FeatureMap> = dims
        .iter()
        .enumerate()
        .map(|(l, &(h, w))| random_map(&mut rng, l as u8 + 1, 4, h, w))
        .collect();
    let mut modes: Vec<FusionMode> = (0..4)
        .map(|_| FusionMode::DynamicWeighting(random_params(&mut rng, 4, 4)))
        .collect();
    // one level with an inactive gate convolution
    let mut zero = random_params(&mut rng, 4, 4);
    zero.gate_weights.fill(0.0);
    zero.gate_bias.fill(0.0);
    modes[2] = FusionMode::DynamicWeighting(zero.clone());

    let forward = multi_scale_fuse(&fi, &fd, &modes).unwrap();
    fn rev<T: Clone>(v: &[T]) -> Vec<T> {
        v.iter().rev().cloned().collect()
    }
    let backward = multi_scale_fuse(&rev(&fi), &rev(&fd), &rev(&modes)).unwrap();
    for (a, b) in forward.iter().zip(backward.iter().rev()) {
        assert!(a
            .data()
            .iter()
            .zip(b.data().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let half = fi[2].data() + &(fd[2].data() * &zero.gamma.view().into_shape_with_order((4, 1, 1)).unwrap() * 0.5);
    assert_eq!(forward[2].data(), &half);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_bound_and_linearity(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let fi = random_map(&mut rng, 1, 3, 3, 4);
        let fd = random_map(&mut rng, 1, 3, 3, 4);
        let p = random_params(&mut rng, 3, 3);
        let out = fuse_features(&fi, &fd, &p).unwrap();
        for ((c, y, x), o) in out.data().indexed_iter() {
            let bound = p.gamma[c].abs() * fd.data()[[c, y, x]].abs();
            prop_assert!((o - fi.data()[[c, y, x]]).abs() <= bound + 1e-15);
        }
        let scaled = FeatureMap::new(1, fd.data() * alpha).unwrap();
        let out_scaled = fuse_features(&fi, &scaled, &p).unwrap();
        for ((o, s), i) in out.data().iter().zip(out_scaled.data()).zip(fi.data()) {
            prop_assert!(((s - i) - alpha * (o - i)).abs() <= 1e-12);
        }
    }

    #[test]
    fn sum_mode_is_elementwise_addition(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let fi = random_map(&mut rng, 2, 3, 2, 5);
        let fd = random_map(&mut rng, 2, 3, 2, 5);
        let out = fuse_sum(&fi, &fd).unwrap();
        prop_assert_eq!(out.data(), &(fi.data() + fd.data()));
    }
}
