use nsl_core::autograd::check::check_gradients_per_tensor;
use nsl_core::autograd::{Graph, Tensor};
use nsl_core::geometry::DisparityMap;
use nsl_core::matcher::{
    build_cost_volume, build_pyramid, forward_op, lookup, pack_targets, sequence_loss,
    sequence_loss_op, MatcherConfig, MatcherInput, MatcherMode, MatcherParams, Upsample,
};
use nsl_core::nn::Binding;
use nsl_core::raster::{Image, Raster};
use nsl_core::rng;
use rand::Rng;

fn noise_image(w: usize, h: usize, seed: u64) -> Image {
    let mut r = rng::stream(seed, "test.image");
    Image::from_fn(w, h, |_, _| r.random_range(0.0..1.0))
}

fn micro_config(mode: MatcherMode) -> MatcherConfig {
    MatcherConfig {
        mode,
        feature_dim: 8,
        hidden_dim: 8,
        iters_train: 2,
        iters_eval: 2,
        upsample: Upsample::Bilinear,
        ..MatcherConfig::default()
    }
}

#[test]
fn cost_volume_matches_nested_loops() {
    let mut r = rng::stream(3, "test.cv");
    let f = |r: &mut rng::StreamRng| {
        Tensor::<f64>::new(
            vec![1, 16, 8, 8],
            (0..1024).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
    };
    let (a, b) = (f(&mut r), f(&mut r));
    let c = build_cost_volume(&a, &b).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            for k in 0..8 {
                let want: f64 = (0..16)
                    .map(|h| a.data()[(h * 8 + i) * 8 + j] * b.data()[(h * 8 + i) * 8 + k])
                    .sum();
                let got = c.data()[(i * 8 + j) * 8 + k];
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }
}

#[test]
fn cost_volume_one_hot_and_diagonal() {
    // pixel j is hot in channel j % 3
    let mut data = vec![0.0f64; 3 * 2 * 6];
    for i in 0..2 {
        for j in 0..6 {
            data[((j % 3) * 2 + i) * 6 + j] = 1.0;
        }
    }
    let f = Tensor::new(vec![1, 3, 2, 6], data);
    let c = build_cost_volume(&f, &f).unwrap();
    for i in 0..2 {
        for j in 0..6 {
            for k in 0..6 {
                let want = if j % 3 == k % 3 { 1.0 } else { 0.0 };
                assert_eq!(c.data()[(i * 6 + j) * 6 + k], want);
            }
        }
    }
}

#[test]
fn cost_volume_rejects_mismatch() {
    let a = Tensor::<f64>::zeros(vec![1, 4, 2, 6]);
    let b = Tensor::<f64>::zeros(vec![1, 4, 2, 5]);
    assert!(build_cost_volume(&a, &b).is_err());
}

#[test]
fn pyramid_sizes_and_constants() {
    let c = Tensor::<f64>::full(vec![1, 2, 32, 32], 0.7);
    let p = build_pyramid(&c, 4).unwrap();
    let sizes: Vec<usize> = p.iter().map(|l| *l.shape().last().unwrap()).collect();
    assert_eq!(sizes, vec![32, 16, 8, 4]);
    assert!(p
        .iter()
        .all(|l| l.data().iter().all(|&v| (v - 0.7).abs() < 1e-15)));
    let small = Tensor::<f64>::zeros(vec![1, 1, 1, 7]);
    assert!(build_pyramid(&small, 4).is_err());
}

#[test]
fn lookup_reads_direct_indices_and_pads_zero() {
    let (h, w) = (2, 16);
    let mut r = rng::stream(5, "test.lookup");
    let c = Tensor::<f64>::new(
        vec![1, h, w, w],
        (0..h * w * w).map(|_| r.random_range(0.5..1.5)).collect(),
    );
    let p = build_pyramid(&c, 4).unwrap();
    // j - d = 8 at every pixel; 8 is divisible by 2^3
    let d = Tensor::new(
        vec![1, 1, h, w],
        (0..h * w).map(|i| (i % w) as f64 - 8.0).collect(),
    );
    let out = lookup(&p, &d, 0);
    assert_eq!(out.shape(), &[1, 4, h, w]);
    for l in 0..4 {
        for i in 0..h {
            for j in 0..w {
                let k = p[l].shape()[3];
                let want = p[l].data()[(i * w + j) * k + (8 >> l)];
                assert_eq!(out.data()[(l * h + i) * w + j], want);
            }
        }
    }
    let far = Tensor::full(vec![1, 1, h, w], -1000.0);
    assert!(lookup(&p, &far, 4).data().iter().all(|&v| v == 0.0));
    assert_eq!(lookup(&p, &far, 4).shape()[1], 36);
}

#[test]
fn sequence_loss_closed_forms() {
    let gt = DisparityMap::dense(Raster::filled(4, 3, 2.0));
    let off = |e: f64| Raster::filled(4, 3, 2.0 + e);
    assert_eq!(sequence_loss(&[off(0.0), off(0.0)], &gt, 0.9).unwrap(), 0.0);
    assert!((sequence_loss(&[off(0.5)], &gt, 0.9).unwrap() - 0.5).abs() < 1e-15);
    let l = sequence_loss(&[off(1.0), off(-1.0), off(1.0)], &gt, 0.9).unwrap();
    assert!((l - 2.71).abs() < 1e-12);
    let empty = DisparityMap::new(Raster::filled(4, 3, 2.0), Raster::filled(4, 3, false)).unwrap();
    assert!(sequence_loss(&[off(0.0)], &empty, 0.9).is_err());
}

#[test]
fn encoder_and_context_shapes() {
    let cfg = MatcherConfig {
        feature_dim: 16,
        hidden_dim: 8,
        ..MatcherConfig::default()
    };
    let m = MatcherParams::init(cfg, 1).unwrap();
    let img = noise_image(64, 64, 1);
    let f = m
        .encode_features(&img, nsl_core::geometry::Pairing::CameraProjector)
        .unwrap();
    assert_eq!(f.shape(), &[1, 16, 16, 16]);
    assert_eq!(
        f,
        m.encode_features(&img, nsl_core::geometry::Pairing::CameraProjector)
            .unwrap()
    );
    let ctx = m.encode_context(&noise_image(96, 64, 2)).unwrap();
    let dims: Vec<(usize, usize)> = ctx
        .iter()
        .map(|(h, _)| (h.shape()[2], h.shape()[3]))
        .collect();
    assert_eq!(dims, vec![(16, 24), (8, 12), (4, 6)]);
    assert!(ctx
        .iter()
        .all(|(h, _)| h.data().iter().all(|v| v.abs() < 1.0)));
}

#[test]
fn zero_bias_encoder_maps_zero_to_zero() {
    let mut m = MatcherParams::init(
        MatcherConfig {
            feature_dim: 8,
            hidden_dim: 8,
            ..MatcherConfig::default()
        },
        2,
    )
    .unwrap();
    let names: Vec<String> = m
        .params
        .names()
        .filter(|n| n.ends_with(".b"))
        .map(String::from)
        .collect();
    for n in names {
        m.params.zero_prefix(&n);
    }
    // mid-gray is zero after normalization
    let f = m
        .encode_features(
            &Image::filled(32, 32, 0.5),
            nsl_core::geometry::Pairing::CameraProjector,
        )
        .unwrap();
    assert!(f.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_contracts_per_mode() {
    for mode in MatcherMode::ALL {
        let cfg = MatcherConfig {
            iters_eval: 3,
            ..micro_config(mode)
        };
        let m = MatcherParams::init(cfg, 3).unwrap();
        let (l, p, r) = (
            noise_image(32, 16, 1),
            noise_image(32, 16, 2),
            noise_image(32, 16, 3),
        );
        let input =
            MatcherInput::<f32>::new(mode, &[&l], Some(&[&p]), Some(&[&r]), vec![0.6]).unwrap();
        let out = m.predict_batch(&input, None).unwrap();
        assert_eq!(out[0].len(), 3);
        assert_eq!(out[0][0].values.dims(), (32, 16));
        let g = Graph::<f32>::new();
        let b = m.params.bind(&g, false);
        let fw = forward_op(&g, &b, &m.config, &input, 1, true).unwrap();
        let want = if mode == MatcherMode::Bino { 72 } else { 36 };
        assert_eq!(g.shape(fw.first_lookup)[1], want);
    }
    let missing = MatcherInput::<f32>::new(
        MatcherMode::Stereo,
        &[&noise_image(32, 16, 1)],
        None,
        None,
        vec![1.0],
    );
    assert!(matches!(missing, Err(nsl_core::NslError::Mode { .. })));
}

#[test]
fn zero_head_keeps_disparity_zero() {
    let mut m = MatcherParams::init(micro_config(MatcherMode::Mono), 4).unwrap();
    m.params.zero_prefix("head.c2");
    let (l, p) = (noise_image(32, 16, 1), noise_image(32, 16, 2));
    let input =
        MatcherInput::<f32>::new(MatcherMode::Mono, &[&l], Some(&[&p]), None, vec![1.0]).unwrap();
    let out = m.predict_batch(&input, None).unwrap();
    assert!(out[0].iter().all(|d| d.values.iter().all(|&v| v == 0.0)));
}

#[test]
fn micro_matcher_gradients() {
    for mode in MatcherMode::ALL {
        let cfg = micro_config(mode);
        let m = MatcherParams::init(cfg.clone(), 11).unwrap();
        let params64 = m.params.cast::<f64>();
        let names: Vec<String> = params64.names().map(String::from).collect();
        // random biases keep pre-activations off the ReLU kink at d = 0
        let mut jit = rng::stream(12, "test.bias");
        let tensors: Vec<Tensor<f64>> = params64
            .iter()
            .map(|(n, t)| {
                if n.ends_with(".b") {
                    Tensor::new(
                        t.shape().to_vec(),
                        (0..t.len()).map(|_| jit.random_range(-0.1..0.1)).collect(),
                    )
                } else {
                    t.clone()
                }
            })
            .collect();
        let (l, p, r) = (
            noise_image(32, 16, 21),
            noise_image(32, 16, 22),
            noise_image(32, 16, 23),
        );
        let input =
            MatcherInput::<f64>::new(mode, &[&l], Some(&[&p]), Some(&[&r]), vec![0.7]).unwrap();
        let mut q = rng::stream(9, "test.gt");
        let gt = DisparityMap::dense(Raster::from_fn(32, 16, |_, _| q.random_range(0.0..6.0)));
        let (target, mask) = pack_targets::<f64>(&[&gt], input.padded_size());
        let loss = |g: &Graph<f64>, vars: &[nsl_core::autograd::Var]| {
            let b = Binding::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            let fw = forward_op(g, &b, &cfg, &input, cfg.iters_train, false).unwrap();
            sequence_loss_op(g, &fw.sequence, &target, &mask, cfg.loss_gamma).unwrap()
        };
        let mut r = rng::stream(1, "test.gradcheck");
        let rep = check_gradients_per_tensor(&tensors, loss, 6, 1e-5, 1e-5, &mut r);
        assert!(rep.checked >= 200, "{}", rep.checked);
        assert!(rep.max_rel_error < 1e-4, "{mode}: {rep:?}");
    }
}
