use proptest::prelude::*;
use pvkit_core::depth::completion::{binomial_weights, StageGrid};
use pvkit_core::depth::{
    beam_rows, complete_depth, complete_depth_staged, disparity_to_depth, ray_drop, simulate_lidar, CameraIntrinsics,
    CompletionConfig, DepthMap, LidarSimConfig,
};

// ---- scalar reference for each completion stage -------------------------

type Grid = Vec<Vec<Option<f64>>>;

fn to_grid(s: &StageGrid) -> Grid {
    (0..s.height)
        .map(|r| {
            (0..s.width)
                .map(|c| {
                    let i = r * s.width + c;
                    s.valid[i].then_some(s.values[i])
                })
                .collect()
        })
        .collect()
}

fn window(g: &Grid, r: usize, c: usize, rad: usize, keep: impl Fn(isize, isize) -> bool) -> Vec<Option<f64>> {
    let mut out = Vec::new();
    for dy in -(rad as isize)..=rad as isize {
        for dx in -(rad as isize)..=rad as isize {
            let (y, x) = (r as isize + dy, c as isize + dx);
            if y < 0 || x < 0 || y >= g.len() as isize || x >= g[0].len() as isize || !keep(dy, dx) {
                continue;
            }
            out.push(g[y as usize][x as usize]);
        }
    }
    out
}

fn ref_dilate(g: &Grid, size: usize, diamond: bool) -> Grid {
    let rad = size / 2;
    let keep = |dy: isize, dx: isize| !diamond || dy.abs() + dx.abs() <= rad as isize;
    (0..g.len())
        .map(|r| {
            (0..g[0].len())
                .map(|c| window(g, r, c, rad, keep).into_iter().flatten().reduce(f64::max))
                .collect()
        })
        .collect()
}

fn ref_erode(g: &Grid, size: usize) -> Grid {
    let rad = size / 2;
    (0..g.len())
        .map(|r| {
            (0..g[0].len())
                .map(|c| {
                    let w = window(g, r, c, rad, |_, _| true);
                    if w.iter().any(Option::is_none) {
                        None
                    } else {
                        w.into_iter().flatten().reduce(f64::min)
                    }
                })
                .collect()
        })
        .collect()
}

fn ref_fill(g: &Grid, size: usize, from_row: usize) -> Grid {
    let d = ref_dilate(g, size, false);
    let mut out = g.clone();
    for r in from_row..g.len() {
        for c in 0..g[0].len() {
            if out[r][c].is_none() {
                out[r][c] = d[r][c];
            }
        }
    }
    out
}

fn ref_top(g: &Grid) -> Option<usize> {
    g.iter().position(|row| row.iter().any(Option::is_some))
}

fn ref_extend(g: &Grid) -> Grid {
    let mut out = g.clone();
    let Some(top) = ref_top(g) else { return out };
    for c in 0..g[0].len() {
        if let Some(first) = (top..g.len()).find(|&r| g[r][c].is_some()) {
            for row in out.iter_mut().take(first).skip(top) {
                row[c] = g[first][c];
            }
        }
    }
    out
}

fn ref_median(g: &Grid, size: usize) -> Grid {
    let rad = size / 2;
    (0..g.len())
        .map(|r| {
            (0..g[0].len())
                .map(|c| {
                    g[r][c]?;
                    let mut v: Vec<f64> = window(g, r, c, rad, |_, _| true).into_iter().flatten().collect();
                    v.sort_by(f64::total_cmp);
                    Some(v[(v.len() - 1) / 2])
                })
                .collect()
        })
        .collect()
}

fn ref_blur(g: &Grid, size: usize) -> Grid {
    // weights from Pascal's triangle, written out independently
    let mut k = vec![1.0f64];
    for _ in 1..size {
        k = (0..=k.len())
            .map(|i| if i == 0 || i == k.len() { 1.0 } else { k[i - 1] + k[i] })
            .collect();
    }
    let rad = size / 2;
    (0..g.len())
        .map(|r| {
            (0..g[0].len())
                .map(|c| {
                    g[r][c]?;
                    let (mut num, mut den) = (0.0, 0.0);
                    for dy in -(rad as isize)..=rad as isize {
                        for dx in -(rad as isize)..=rad as isize {
                            let (y, x) = (r as isize + dy, c as isize + dx);
                            if y < 0 || x < 0 || y >= g.len() as isize || x >= g[0].len() as isize {
                                continue;
                            }
                            if let Some(v) = g[y as usize][x as usize] {
                                let wt = k[(dy + rad as isize) as usize] * k[(dx + rad as isize) as usize];
                                num += wt * v;
                                den += wt;
                            }
                        }
                    }
                    Some(num / den)
                })
                .collect()
        })
        .collect()
}

fn assert_grid_eq(actual: &StageGrid, expected: &Grid, tol: f64, stage: &str) {
    let a = to_grid(actual);
    for (r, (ra, re)) in a.iter().zip(expected).enumerate() {
        for (c, (va, ve)) in ra.iter().zip(re).enumerate() {
            match (va, ve) {
                (None, None) => {}
                (Some(x), Some(y)) => assert!((x - y).abs() <= tol, "{stage} ({r},{c}): {x} vs {y}"),
                _ => panic!("{stage} ({r},{c}): validity differs: {va:?} vs {ve:?}"),
            }
        }
    }
}

/// 16x16 scene: a 5 m box in front of a 20 m background, sampled on every
/// third row and every other column, with a gap in the middle rows.
fn two_depth_scene() -> DepthMap {
    let mut v = vec![0.0; 256];
    for r in (2..16).step_by(3) {
        if r == 8 {
            continue;
        }
        for c in (0..16).step_by(2) {
            let object = (5..11).contains(&r) && (4..10).contains(&c);
            v[r * 16 + c] = if object { 5.0 } else { 20.0 };
        }
    }
    DepthMap::new(16, 16, v).unwrap()
}

#[test]
fn completion_matches_scalar_reference_per_stage() {
    let cfg = CompletionConfig::default();
    let sparse = two_depth_scene();
    let s = complete_depth_staged(&sparse, &cfg).unwrap();

    let inv: Grid = (0..16)
        .map(|r| {
            (0..16)
                .map(|c| {
                    let d = sparse.get(r, c);
                    (d > 0.0).then(|| 100.0 - d)
                })
                .collect()
        })
        .collect();
    assert_grid_eq(&s.inverted, &inv, 0.0, "invert");
    let dil = ref_dilate(&inv, 5, true);
    assert_grid_eq(&s.dilated, &dil, 0.0, "dilate");
    let closed = ref_erode(&ref_dilate(&dil, 5, false), 5);
    assert_grid_eq(&s.closed, &closed, 0.0, "close");
    let small = ref_fill(&closed, 7, 0);
    assert_grid_eq(&s.small_filled, &small, 0.0, "small fill");
    let ext = ref_extend(&small);
    assert_grid_eq(&s.extended, &ext, 0.0, "extend");
    let top = ref_top(&ext).unwrap();
    let mut large = ref_fill(&ext, 31, top);
    while large[top..].iter().flatten().any(Option::is_none) {
        large = ref_fill(&large, 31, top);
    }
    assert_grid_eq(&s.large_filled, &large, 0.0, "large fill");
    let med = ref_median(&large, 5);
    assert_grid_eq(&s.median, &med, 0.0, "median");
    let blur = ref_blur(&med, 5);
    assert_grid_eq(&s.blurred, &blur, 1e-12, "blur");

    for r in 0..16 {
        for c in 0..16 {
            match blur[r][c] {
                Some(v) => {
                    let expected = (100.0 - v).clamp(5.0, 20.0);
                    assert!((s.output.get(r, c) - expected).abs() < 1e-9);
                }
                None => assert_eq!(s.output.get(r, c), 0.0),
            }
        }
    }
    // rows from the first sampled row down are dense
    assert!((2..16).all(|r| (0..16).all(|c| s.output.is_valid(r, c))));
}

#[test]
fn binomial_kernel_is_pascal_row() {
    assert_eq!(
        binomial_weights(5),
        vec![1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0]
    );
}

#[test]
fn constant_field_is_preserved() {
    let mut v = vec![0.0; 40 * 30];
    for r in (5..30).step_by(4) {
        for c in (0..40).step_by(3) {
            v[r * 40 + c] = 10.0;
        }
    }
    let out = complete_depth(&DepthMap::new(40, 30, v).unwrap(), &CompletionConfig::default()).unwrap();
    for r in 5..30 {
        for c in 0..40 {
            assert!((out.get(r, c) - 10.0).abs() < 1e-9);
        }
    }
}

#[test]
fn dense_input_stays_dense_and_in_range() {
    let v: Vec<f64> = (0..24 * 18).map(|i| 3.0 + (i % 17) as f64 * 0.7).collect();
    let map = DepthMap::new(24, 18, v).unwrap();
    let out = complete_depth(&map, &CompletionConfig::default()).unwrap();
    let (lo, hi) = map.valid_range().unwrap();
    assert_eq!(out.valid_count(), 24 * 18);
    assert!(out.values().iter().all(|v| (lo..=hi).contains(v)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn completion_range_and_coverage(
        seed_pixels in prop::collection::vec((0usize..20, 0usize..24, 1.0f64..90.0), 1..40),
    ) {
        let mut v = vec![0.0; 20 * 24];
        for (r, c, d) in &seed_pixels {
            v[r * 24 + c] = *d;
        }
        let map = DepthMap::new(24, 20, v).unwrap();
        let (lo, hi) = map.valid_range().unwrap();
        let cfg = CompletionConfig::default();
        let once = complete_depth(&map, &cfg).unwrap();
        let top = map.top_valid_row().unwrap();
        for r in top..20 {
            for c in 0..24 {
                prop_assert!(once.is_valid(r, c));
            }
        }
        prop_assert!(once.values().iter().filter(|v| **v > 0.0).all(|v| (lo..=hi).contains(v)));
        let twice = complete_depth(&once, &cfg).unwrap();
        prop_assert!(twice.values().iter().filter(|v| **v > 0.0).all(|v| (lo..=hi).contains(v)));
    }

    #[test]
    fn lidar_output_is_a_bitwise_subset(
        seed in any::<u64>(),
        keep in 0.0f64..=1.0,
    ) {
        let mut rng = pvkit_core::rng::SeededRng::new(seed);
        let v: Vec<f64> = (0..32 * 48).map(|_| if rng.next_f64() < 0.1 { 0.0 } else { rng.uniform(1.0, 80.0) }).collect();
        let dense = DepthMap::new(32, 48, v).unwrap();
        let intr = CameraIntrinsics { focal_x: None, focal_y: 60.0, principal_x: None, principal_y: 5.0, baseline: None };
        let cfg = LidarSimConfig { beams: 16, keep_ratio: keep, seed, ..LidarSimConfig::default() };
        let sparse = simulate_lidar(&dense, &intr, &cfg).unwrap();
        let dropped = ray_drop(&sparse, keep, seed).unwrap();
        prop_assert!(sparse.valid_rows().len() <= 16);
        for (i, (&s, &d)) in sparse.values().iter().zip(dense.values()).enumerate() {
            prop_assert!(s == 0.0 || s.to_bits() == d.to_bits(), "pixel {}", i);
            let k = dropped.values()[i];
            prop_assert!(k == 0.0 || k.to_bits() == s.to_bits());
        }
        prop_assert_eq!(ray_drop(&sparse, keep, seed).unwrap(), dropped);
    }

    #[test]
    fn disparity_depth_is_monotone(a in 2u16.., b in 2u16..) {
        let intr = CameraIntrinsics { focal_x: Some(2262.0), focal_y: 2262.0, principal_x: None, principal_y: 0.0, baseline: Some(0.209) };
        let map = disparity_to_depth(&[a, b], 2, 1, &intr).unwrap();
        if a < b {
            prop_assert!(map.get(0, 0) > map.get(0, 1));
        } else if a == b {
            prop_assert_eq!(map.get(0, 0), map.get(0, 1));
        }
    }
}

/// Independent beam binning: angle per row, nearest in-FOV row per beam.
fn reference_beam_rows(height: usize, fy: f64, cy: f64, beams: usize, fov: (f64, f64)) -> Vec<usize> {
    let angle = |r: f64| ((cy - r) / fy).atan().to_degrees();
    let (top_edge, bottom_edge) = (angle(-0.5), angle(height as f64 - 0.5));
    let mut rows = Vec::new();
    for b in 0..beams {
        let a = fov.0 + (fov.1 - fov.0) * b as f64 / (beams - 1) as f64;
        if a > top_edge || a < bottom_edge {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for r in 0..height {
            let ar = angle(r as f64);
            if ar < fov.0 || ar > fov.1 {
                continue;
            }
            let d = (ar - a).abs();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, r));
            }
        }
        rows.extend(best.map(|(_, r)| r));
    }
    rows.sort_unstable();
    rows.dedup();
    rows
}

#[test]
fn sixty_four_beams_on_256_rows() {
    let intr = CameraIntrinsics {
        focal_x: None,
        focal_y: 400.0,
        principal_x: None,
        principal_y: 20.0,
        baseline: None,
    };
    let cfg = LidarSimConfig {
        keep_ratio: 1.0,
        ..LidarSimConfig::default()
    };
    let expected = reference_beam_rows(256, 400.0, 20.0, 64, (-24.8, 2.0));
    assert_eq!(expected.len(), 64);
    assert_eq!(beam_rows(256, &intr, &cfg).unwrap(), expected);
    let dense = DepthMap::new(8, 256, vec![12.5; 8 * 256]).unwrap();
    let sparse = simulate_lidar(&dense, &intr, &cfg).unwrap();
    assert_eq!(sparse.valid_rows(), expected);
}

#[test]
fn ray_drop_count_within_three_sigma() {
    let dense = DepthMap::new(100, 100, vec![7.0; 10_000]).unwrap();
    for seed in 0..50 {
        let kept = ray_drop(&dense, 0.7, seed).unwrap().valid_count();
        assert!((6862..=7138).contains(&kept), "seed {seed}: {kept}");
    }
}
