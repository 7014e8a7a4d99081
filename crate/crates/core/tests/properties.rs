use nsl_core::autograd::Tensor;
use nsl_core::geometry::{depth_to_disparity, disparity_to_depth};
use nsl_core::matcher::{build_cost_volume, build_pyramid};
use nsl_core::metrics::{aggregate, compute_metrics, Weighting, DEFAULT_THRESHOLDS};
use nsl_core::{DepthMap, DisparityMap, Raster, ValidityMask};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn depth(w: usize, h: usize, seed: u64, keep: f64) -> DepthMap {
    let v = uniform(w * h, 0.3, 3.0, seed);
    let m = uniform(w * h, 0.0, 1.0, seed ^ 0xabc);
    DepthMap::new(
        Raster::from_vec(w, h, v).unwrap(),
        Raster::from_vec(w, h, m.iter().map(|&u| u < keep).collect()).unwrap(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cost_volume_matches_oracle(n in 1usize..=2, d in 1usize..=32, h in 1usize..=16, w in 1usize..=32, seed in any::<u64>()) {
        let a = uniform(n * d * h * w, -1.0, 1.0, seed);
        let b = uniform(n * d * h * w, -1.0, 1.0, seed.wrapping_add(1));
        let fl = Tensor::<f32>::new(vec![n, d, h, w], a.iter().map(|&v| v as f32).collect());
        let fr = Tensor::<f32>::new(vec![n, d, h, w], b.iter().map(|&v| v as f32).collect());
        let c = build_cost_volume(&fl, &fr).unwrap();
        prop_assert_eq!(c.shape(), &[n, h, w, w]);
        let at = |x: &[f64], b_: usize, ch: usize, i: usize, j: usize| x[((b_ * d + ch) * h + i) * w + j] as f32 as f64;
        for b_ in 0..n {
            for i in 0..h {
                for j in 0..w {
                    for k in 0..w {
                        let (mut want, mut scale) = (0.0, 0.0);
                        for ch in 0..d {
                            let p = at(&a, b_, ch, i, j) * at(&b, b_, ch, i, k);
                            want += p;
                            scale += p.abs();
                        }
                        let got = c.data()[((b_ * h + i) * w + j) * w + k] as f64;
                        prop_assert!((got - want).abs() <= 1e-5 * scale.max(1e-12), "{} vs {}", got, want);
                    }
                }
            }
        }
    }

    #[test]
    fn pyramid_levels_are_bin_means(rows in 1usize..12, k in 8usize..70, levels in 1usize..=4, seed in any::<u64>()) {
        let data = uniform(rows * k, -2.0, 2.0, seed);
        let c = Tensor::<f64>::new(vec![1, rows, 1, k], data.clone());
        let p = build_pyramid(&c, levels).unwrap();
        prop_assert_eq!(p.len(), levels);
        for (l, level) in p.iter().enumerate() {
            let bin = 1usize << l;
            let kl = *level.shape().last().unwrap();
            prop_assert_eq!(kl, k >> l);
            for r in 0..rows {
                for m in 0..kl {
                    let mean = data[r * k + m * bin..r * k + (m + 1) * bin].iter().sum::<f64>() / bin as f64;
                    prop_assert!((level.data()[r * kl + m] - mean).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn depth_disparity_roundtrip(z in prop::collection::vec(0.05f64..50.0, 1..64), f in 10.0f64..2000.0, b in 0.005f64..1.0) {
        let n = z.len();
        let map = DepthMap::dense(Raster::from_vec(n, 1, z.clone()).unwrap());
        let d = depth_to_disparity(&map, f, b);
        let back = disparity_to_depth(&d, f, b);
        for (i, &zi) in z.iter().enumerate() {
            let d_i = d.valid_at(i, 0).unwrap();
            prop_assert!((d_i * zi - f * b).abs() <= 1e-12 * f * b);
            let zb = back.valid_at(i, 0).unwrap();
            prop_assert!((zb - zi).abs() <= 1e-9 * zi);
        }
        let disp = DisparityMap::dense(Raster::from_vec(n, 1, z).unwrap());
        let there = depth_to_disparity(&disparity_to_depth(&disp, f, b), f, b);
        for i in 0..n {
            let (a, c) = (disp.valid_at(i, 0).unwrap(), there.valid_at(i, 0).unwrap());
            prop_assert!((a - c).abs() <= 1e-9 * a);
        }
    }

    #[test]
    fn metrics_match_scalar_oracle(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let pred = depth(w, h, seed, 0.9);
        let gt = depth(w, h, seed.wrapping_add(7), 0.8);
        let dp = depth_to_disparity(&pred, 100.0, 0.1);
        let dg = depth_to_disparity(&gt, 100.0, 0.1);
        let (mut n, mut abs, mut sq, mut rel, mut epe) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut hits = [0.0; 3];
        for y in 0..h {
            for x in 0..w {
                if !(pred.mask.at(x, y) && gt.mask.at(x, y)) {
                    continue;
                }
                let (p, g) = (pred.values.at(x, y), gt.values.at(x, y));
                n += 1.0;
                abs += (p - g).abs();
                sq += (p - g).powi(2);
                rel += (p - g).abs() / g;
                let ratio = f64::max(p / g, g / p);
                for (hit, t) in hits.iter_mut().zip(DEFAULT_THRESHOLDS) {
                    if ratio < t {
                        *hit += 1.0;
                    }
                }
                epe += (dp.values.at(x, y) - dg.values.at(x, y)).abs();
            }
        }
        let r = compute_metrics(&pred, &gt, Some(&dp), Some(&dg), &DEFAULT_THRESHOLDS);
        if n == 0.0 {
            prop_assert!(r.is_err());
            return Ok(());
        }
        let r = r.unwrap();
        prop_assert!((r.mae - abs / n).abs() <= 1e-9);
        prop_assert!((r.rmse - (sq / n).sqrt()).abs() <= 1e-9);
        prop_assert!((r.rel - rel / n).abs() <= 1e-9);
        prop_assert!((r.epe.unwrap() - epe / n).abs() <= 1e-9);
        for (hit, t) in hits.iter().zip(DEFAULT_THRESHOLDS) {
            prop_assert!((r.delta_at(t).unwrap() - hit / n).abs() <= 1e-9);
        }
        prop_assert_eq!(r.valid_pixel_count, n as usize);
        // structural invariants
        prop_assert!(r.rmse >= r.mae - 1e-12);
        prop_assert!(r.delta_at(1.05).unwrap() <= r.delta_at(1.10).unwrap());
        prop_assert!(r.delta_at(1.10).unwrap() <= r.delta_at(1.25).unwrap());
    }

    #[test]
    fn metrics_scale_with_units(seed in any::<u64>(), k in 0.01f64..100.0) {
        let pred = depth(9, 7, seed, 1.0);
        let gt = depth(9, 7, seed.wrapping_add(1), 1.0);
        let scaled = |m: &DepthMap| DepthMap::new(m.values.map(|v| v * k), m.mask.clone()).unwrap();
        let a = compute_metrics(&pred, &gt, None, None, &DEFAULT_THRESHOLDS).unwrap();
        let b = compute_metrics(&scaled(&pred), &scaled(&gt), None, None, &DEFAULT_THRESHOLDS).unwrap();
        prop_assert!((b.mae - k * a.mae).abs() <= 1e-9 * k.max(1.0));
        prop_assert!((b.rmse - k * a.rmse).abs() <= 1e-9 * k.max(1.0));
        prop_assert!((b.rel - a.rel).abs() <= 1e-9);
        for t in DEFAULT_THRESHOLDS {
            prop_assert_eq!(a.delta_at(t), b.delta_at(t));
        }
    }

    #[test]
    fn pooled_aggregate_equals_concatenation(seed in any::<u64>(), split in 1usize..9) {
        let pred = depth(10, 6, seed, 1.0);
        let gt = depth(10, 6, seed.wrapping_add(3), 1.0);
        let whole = compute_metrics(&pred, &gt, None, None, &DEFAULT_THRESHOLDS).unwrap();
        let crop = |m: &DepthMap, x0: usize, w: usize| {
            DepthMap::new(m.values.crop(x0, 0, w, 6).unwrap(), m.mask.crop(x0, 0, w, 6).unwrap()).unwrap()
        };
        let left = compute_metrics(&crop(&pred, 0, split), &crop(&gt, 0, split), None, None, &DEFAULT_THRESHOLDS).unwrap();
        let right = compute_metrics(&crop(&pred, split, 10 - split), &crop(&gt, split, 10 - split), None, None, &DEFAULT_THRESHOLDS).unwrap();
        let pooled = aggregate(&[left.clone(), right.clone()], Weighting::PixelPooled).unwrap();
        prop_assert!((pooled.mae - whole.mae).abs() <= 1e-12);
        prop_assert!((pooled.rmse - whole.rmse).abs() <= 1e-12);
        let mean = aggregate(&[left.clone(), right.clone()], Weighting::PerImageMean).unwrap();
        prop_assert!((mean.mae - 0.5 * (left.mae + right.mae)).abs() <= 1e-12);
    }
}

#[test]
fn empty_joint_mask_is_an_error() {
    let a = depth(4, 4, 1, 1.0);
    let none = DepthMap::new(a.values.clone(), ValidityMask::filled(4, 4, false)).unwrap();
    assert!(compute_metrics(&a, &none, None, None, &DEFAULT_THRESHOLDS).is_err());
}
