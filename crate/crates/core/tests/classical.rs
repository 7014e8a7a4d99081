use nsl_core::classical::{
    block_match, temporal_zncc_decode, zncc, BlockMatchConfig, TemporalStack,
};
use nsl_core::geometry::{Intrinsics, RigCalibration};
use nsl_core::patterns::{generate_pattern, PatternKind, PatternSpec};
use nsl_core::simulator::{
    render_ir, render_sample, Material, Primitive, RenderConfig, Scene, Vec3, View,
};
use nsl_core::{DisparityMap, Image};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn texture(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(w, h, |_, _| rng.random::<f64>())
}

/// Band-limited texture: a sum of random sinusoids, so sub-pixel shifts are well defined.
fn smooth_texture(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..12)
        .map(|_| {
            [
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.2..1.0),
            ]
        })
        .collect();
    Image::from_fn(w, h, |x, y| {
        waves
            .iter()
            .map(|[kx, ky, ph, a]| a * (kx * x as f64 + ky * y as f64 + ph).sin())
            .sum()
    })
}

/// Counterpart image such that `out(x) = img(x + shift)`.
fn shifted(img: &Image, shift: i64) -> Image {
    let w = img.width() as i64;
    Image::from_fn(img.width(), img.height(), |x, y| {
        img.at((x as i64 + shift).clamp(0, w - 1) as usize, y)
    })
}

#[test]
fn zncc_recovers_constructed_shift() {
    let left = smooth_texture(80, 30, 11);
    let reference = shifted(&left, 7);
    let cfg = BlockMatchConfig {
        max_disp: 16,
        ..Default::default()
    };
    let d = block_match(&left, &reference, &cfg).unwrap();
    for y in 6..24 {
        for x in 24..70 {
            let v = d
                .valid_at(x, y)
                .unwrap_or_else(|| panic!("({x},{y}) invalid"));
            assert!((v - 7.0).abs() <= 0.01, "({x},{y}) = {v}");
        }
    }
}

#[test]
fn temporal_recovers_constructed_shift() {
    let refs: Vec<Image> = (0..8).map(|k| smooth_texture(60, 12, 100 + k)).collect();
    // the left view sees the reference shifted right by 5 px
    let caps: Vec<Image> = refs.iter().map(|r| shifted(r, -5)).collect();
    let d = temporal_zncc_decode(&TemporalStack::new(caps, refs).unwrap(), 12).unwrap();
    for y in 0..12 {
        for x in 12..54 {
            let v = d.valid_at(x, y).unwrap();
            assert!((v - 5.0).abs() <= 0.01, "({x},{y}) = {v}");
        }
    }
}

fn plane(z: f64) -> Primitive {
    Primitive::plane(
        Vec3::new(0.0, 0.0, z),
        Vec3::new(0.0, 0.0, -1.0),
        Material::lambertian(0.8),
    )
}

fn epe_within(d: &DisparityMap, gt: &DisparityMap, tol: f64) -> (f64, f64) {
    let (mut sum, mut n, mut good) = (0.0, 0usize, 0usize);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if let (Some(a), Some(b)) = (d.valid_at(x, y), gt.valid_at(x, y)) {
                sum += (a - b).abs();
                n += 1;
                good += usize::from((a - b).abs() <= tol);
            }
        }
    }
    assert!(n > 0);
    (sum / n as f64, good as f64 / n as f64)
}

#[test]
fn dot_pattern_plane_is_decoded_subpixel() {
    let (w, h) = (128, 96);
    let rig = RigCalibration::symmetric(Intrinsics::centered(100.0, w, h), 0.08, 0.12);
    let pattern = generate_pattern(&PatternSpec::new(PatternKind::DotsD415, w, h, 4)).unwrap();
    let mut rc = RenderConfig::new(rig, pattern, 1);
    rc.noise_sigma = 0.0;
    let scene = Scene {
        primitives: vec![plane(1.1)],
        ambient_level: 0.0,
        projector_power: 1.0,
    };
    let s = render_sample(&scene, &rc).unwrap();
    let cfg = BlockMatchConfig {
        max_disp: 24,
        ..Default::default()
    };
    let d = block_match(&s.ir_left, &s.pattern_ref.intensities, &cfg).unwrap();
    assert!(d.valid_count() > w * h / 2, "{}", d.valid_count());
    let (_, frac) = epe_within(&d, &s.disp_gt_lp, 0.25);
    assert!(frac >= 0.99, "{frac}");
}

/// Background plane with a thin board in front of its left half.
fn two_planes() -> Scene {
    Scene {
        primitives: vec![
            plane(1.4),
            Primitive::cuboid(
                Vec3::new(-0.3, -0.6, 0.8),
                Vec3::new(0.05, 0.6, 0.82),
                Material::lambertian(0.7),
            ),
        ],
        ambient_level: 0.05,
        projector_power: 1.0,
    }
}

fn two_plane_config(kind: PatternKind, seed: u64, noise: f64) -> RenderConfig {
    let (w, h) = (128, 96);
    let rig = RigCalibration::symmetric(Intrinsics::centered(100.0, w, h), 0.08, 0.12);
    let pattern = generate_pattern(&PatternSpec::new(kind, w, h, seed)).unwrap();
    let mut rc = RenderConfig::new(rig, pattern, 50 + seed);
    rc.noise_sigma = noise;
    rc
}

fn temporal_stack(scene: &Scene, noise: f64) -> TemporalStack {
    let (mut caps, mut refs) = (vec![], vec![]);
    for k in 0..8 {
        let rc = two_plane_config(PatternKind::Alacarte, 10 + k, noise);
        caps.push(render_ir(scene, &rc, View::Left));
        refs.push(rc.pattern.intensities);
    }
    TemporalStack::new(caps, refs).unwrap()
}

#[test]
fn temporal_stack_beats_single_shot() {
    let scene = two_planes();
    let config = |kind: PatternKind, seed: u64| two_plane_config(kind, seed, 0.02);
    let single = render_sample(&scene, &config(PatternKind::DotsD415, 0)).unwrap();
    let cfg = BlockMatchConfig {
        max_disp: 24,
        ..Default::default()
    };
    let d_single = block_match(&single.ir_left, &single.pattern_ref.intensities, &cfg).unwrap();

    let d_temporal = temporal_zncc_decode(&temporal_stack(&scene, 0.02), 24).unwrap();
    let (epe_single, _) = epe_within(&d_single, &single.disp_gt_lp, 0.0);
    let (epe_temporal, _) = epe_within(&d_temporal, &single.disp_gt_lp, 0.0);
    assert!(
        epe_temporal < epe_single,
        "temporal {epe_temporal} vs single {epe_single}"
    );
}

#[test]
fn temporal_accuracy_degrades_with_noise() {
    let scene = two_planes();
    let gt = render_sample(&scene, &two_plane_config(PatternKind::DotsD415, 0, 0.0))
        .unwrap()
        .disp_gt_lp;
    // fraction of ground-truth pixels decoded within half a pixel; invalid counts as a miss
    let accuracy = |noise: f64| {
        let d = temporal_zncc_decode(&temporal_stack(&scene, noise), 24).unwrap();
        let (mut hit, mut n) = (0usize, 0usize);
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                if let Some(g) = gt.valid_at(x, y) {
                    n += 1;
                    hit += usize::from(d.valid_at(x, y).is_some_and(|v| (v - g).abs() <= 0.5));
                }
            }
        }
        hit as f64 / n as f64
    };
    let acc: Vec<f64> = [0.0, 0.05, 0.15].into_iter().map(accuracy).collect();
    assert!(acc[0] >= acc[1] && acc[1] >= acc[2], "{acc:?}");
    assert!(acc[0] > acc[2]);
}

proptest! {
    #[test]
    fn zncc_is_affine_invariant(
        v in prop::collection::vec(0.0f64..1.0, 9..40),
        scale in 0.1f64..10.0,
        offset in -5.0f64..5.0,
        flip in any::<bool>(),
    ) {
        let s = if flip { -scale } else { scale };
        let u: Vec<f64> = v.iter().map(|x| s * x + offset).collect();
        let base = zncc(&v, &v).unwrap();
        prop_assume!(base.is_some());
        let sign = if flip { -1.0 } else { 1.0 };
        let c = zncc(&v, &u).unwrap().unwrap();
        prop_assert!((c - sign).abs() < 1e-9);
        let w: Vec<f64> = v.iter().rev().copied().collect();
        let c1 = zncc(&w, &v).unwrap().unwrap();
        let c2 = zncc(&w, &u).unwrap().unwrap();
        prop_assert!((c2 - sign * c1).abs() < 1e-9);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c1));
    }

    #[test]
    fn block_match_disparities_stay_in_range(seed in 0u64..1000, max_disp in 4usize..20) {
        let left = texture(40, 12, seed);
        let reference = texture(40, 12, seed + 1);
        let cfg = BlockMatchConfig { max_disp, window: 5, ..Default::default() };
        let d = block_match(&left, &reference, &cfg).unwrap();
        for y in 0..12 {
            for x in 0..40 {
                if let Some(v) = d.valid_at(x, y) {
                    prop_assert!(v >= -0.5 && v <= max_disp as f64 + 0.5);
                    prop_assert!(v <= x as f64 + 0.5);
                }
            }
        }
    }
}
