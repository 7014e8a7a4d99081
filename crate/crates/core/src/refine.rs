//! Stage-2 monocular depth refiner with an additive depth prompt.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{NslError, Result};
use crate::geometry::DepthMap;
use crate::matcher::{draw_views, pack_images, LossRecord, MatcherParams, TrainOutcome, View};
use crate::nn::{Binding, Initializer, Net, ParamStore};
use crate::optim::{clip_global_norm, global_norm, AdamW, AdamWConfig, LinearWarmup};
use crate::raster::{Image, Raster};
use crate::simulator::Sample;

/// Scene-scale constant (meters) used to normalize depth inputs and outputs.
pub const DEPTH_SCALE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerConfig {
    /// Channels of the full-resolution encoder stage.
    pub backbone_width: usize,
    /// Number of stride-2 encoder stages, mirrored by the decoder.
    pub decoder_scales: usize,
    /// Weight of the gradient term in the loss.
    pub alpha: f64,
    pub prompt_convs: usize,
    /// Hidden channels of the prompt network.
    pub prompt_width: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            backbone_width: 16,
            decoder_scales: 4,
            alpha: 0.5,
            prompt_convs: 3,
            prompt_width: 16,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_width == 0 || self.prompt_width == 0 {
            return Err(NslError::Config("refiner widths must be positive".into()));
        }
        if !(2..=4).contains(&self.decoder_scales) {
            return Err(NslError::Config("decoder_scales must be in 2..=4".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(NslError::Config(
                "alpha must be finite and non-negative".into(),
            ));
        }
        if self.prompt_convs != 3 {
            return Err(NslError::Config("prompt_convs must be 3".into()));
        }
        Ok(())
    }

    /// Channels at stage `s` (resolution `1/2^s`).
    fn width(&self, s: usize) -> usize {
        self.backbone_width * [1, 1, 2, 2, 4][s]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerParams {
    pub config: RefinerConfig,
    pub params: ParamStore<f32>,
}

fn layout(cfg: &RefinerConfig, seed: u64) -> ParamStore<f32> {
    let mut init = Initializer::new(seed, "refiner.init");
    let c = |s| cfg.width(s);
    init.conv("enc.s0a", c(0), 1, 3);
    init.conv("enc.s0b", c(0), c(0), 3);
    for s in 1..=cfg.decoder_scales {
        init.conv(&format!("enc.d{s}"), c(s), c(s - 1), 3);
        init.conv(&format!("enc.c{s}"), c(s), c(s), 3);
    }
    for s in 0..cfg.decoder_scales {
        init.conv(&format!("dec.u{s}"), c(s), c(s + 1) + c(s), 3);
        init.conv(&format!("dec.f{s}"), c(s), c(s), 3);
    }
    let pw = cfg.prompt_width;
    init.conv("prompt.c1", pw, 2, 3);
    init.conv("prompt.c2", pw, pw, 3);
    init.conv("prompt.c3", c(2), pw, 3);
    init.conv("head.c1", c(0), c(0), 3);
    init.conv_scaled("head.c2", 1, c(0), 3, 0.1);
    let mut store = init.finish();
    // Start from a plausible mid-range depth.
    store.insert("head.c2.b", Tensor::full(vec![1], 0.5));
    store
}

impl RefinerParams {
    pub fn init(config: RefinerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = layout(&config, seed);
        Ok(Self { config, params })
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: "refiner".into(),
            step,
            seed,
            config: serde_json::to_value(&self.config)?,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind != "refiner" {
            return Err(NslError::Config(format!(
                "checkpoint holds a {}, not a refiner",
                c.kind
            )));
        }
        let config: RefinerConfig = serde_json::from_value(c.config.clone())?;
        config.validate()?;
        c.params.check_layout(&layout(&config, 0))?;
        Ok(Self {
            config,
            params: c.params.clone(),
        })
    }

    /// Refine `d_init` guided by the left IR image.
    pub fn refine(&self, ir_left: &Image, d_init: &DepthMap) -> Result<DepthMap> {
        refine(ir_left, d_init, self)
    }
}

/// Invalid pixels take the value of the nearest valid pixel (4-connected
/// breadth-first order); all zeros when nothing is valid.
pub fn fill_nearest(d: &DepthMap) -> Raster<f64> {
    let (w, h) = (d.width(), d.height());
    let mut out = d.values.clone();
    let mut seen = d.mask.clone();
    let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if seen.at(x, y) {
                queue.push_back((x, y));
            }
        }
    }
    if queue.is_empty() {
        return Raster::filled(w, h, 0.0);
    }
    while let Some((x, y)) = queue.pop_front() {
        let v = out.at(x, y);
        let neighbors = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbors {
            if nx < w && ny < h && !seen.at(nx, ny) {
                seen.set(nx, ny, true);
                out.set(nx, ny, v);
                queue.push_back((nx, ny));
            }
        }
    }
    out
}

/// Two-channel prompt `[filled depth / DEPTH_SCALE, mask]`, padded like
/// [`pack_images`].
pub fn pack_prompts<T: Real>(d_init: &[&DepthMap]) -> Result<Tensor<T>> {
    let (w, h) = d_init
        .first()
        .ok_or_else(|| NslError::Shape("empty batch".into()))?
        .values
        .dims();
    let (pw, ph) = (w.div_ceil(16) * 16, h.div_ceil(16) * 16);
    let mut data = Vec::with_capacity(d_init.len() * 2 * pw * ph);
    for d in d_init {
        if d.values.dims() != (w, h) {
            return Err(NslError::Shape("batch depth maps differ in size".into()));
        }
        let filled = fill_nearest(d);
        for y in 0..ph {
            for x in 0..pw {
                data.push(T::from_f64(
                    filled.at(x.min(w - 1), y.min(h - 1)) / DEPTH_SCALE,
                ));
            }
        }
        for y in 0..ph {
            for x in 0..pw {
                data.push(if d.mask.at(x.min(w - 1), y.min(h - 1)) {
                    T::ONE
                } else {
                    T::ZERO
                });
            }
        }
    }
    Ok(Tensor::new(vec![d_init.len(), 2, ph, pw], data))
}

/// Prompt features at 1/4 resolution.
pub fn prompt_op<T: Real>(net: &Net<'_, T>, prompt: Var) -> Var {
    let x = net.conv3_relu("prompt.c1", prompt, true);
    let x = net.conv3_relu("prompt.c2", x, true);
    net.conv3("prompt.c3", x, false)
}

/// Depth `[N,1,H,W]` from a normalized image `[N,1,H,W]` and prompt
/// `[N,2,H,W]`. Sizes must be divisible by `2^decoder_scales`.
pub fn refine_op<T: Real>(net: &Net<'_, T>, cfg: &RefinerConfig, image: Var, prompt: Var) -> Var {
    let g = net.g;
    let x = net.conv3_relu("enc.s0a", image, false);
    let mut skips = vec![net.conv3_relu("enc.s0b", x, false)];
    for s in 1..=cfg.decoder_scales {
        let x = net.conv3_relu(&format!("enc.d{s}"), skips[s - 1], true);
        skips.push(net.conv3_relu(&format!("enc.c{s}"), x, false));
    }
    let mut x = skips[cfg.decoder_scales];
    for s in (0..cfg.decoder_scales).rev() {
        let up = g.resize_bilinear(x, g.shape(skips[s])[2], g.shape(skips[s])[3]);
        let cat = g.concat_channels(&[up, skips[s]]);
        let mut y = net.conv3_relu(&format!("dec.u{s}"), cat, false);
        if s == 2 {
            y = g.add(y, prompt_op(net, prompt));
        }
        x = net.conv3_relu(&format!("dec.f{s}"), y, false);
    }
    let x = net.conv3_relu("head.c1", x, false);
    let x = net.conv3("head.c2", x, false);
    g.affine(x, T::from_f64(DEPTH_SCALE), T::ZERO)
}

fn check_pair(ir_left: &Image, d_init: &DepthMap) -> Result<()> {
    if ir_left.dims() != d_init.values.dims() {
        return Err(NslError::Shape(format!(
            "image {:?} vs initial depth {:?}",
            ir_left.dims(),
            d_init.values.dims()
        )));
    }
    Ok(())
}

/// Full-resolution metric depth; pixels with non-positive depth are invalid.
pub fn refine(ir_left: &Image, d_init: &DepthMap, params: &RefinerParams) -> Result<DepthMap> {
    check_pair(ir_left, d_init)?;
    let g = Graph::<f32>::new();
    let p = params.params.bind(&g, false);
    let image = g.constant(pack_images(&[ir_left])?);
    let prompt = g.constant(pack_prompts(&[d_init])?);
    let out = refine_op(&Net { g: &g, p: &p }, &params.config, image, prompt);
    let t = g.value(out);
    if !t.all_finite() {
        return Err(NslError::NonFinite("refiner output".into()));
    }
    let (_, _, _, pw) = t.dims4();
    let (w, h) = ir_left.dims();
    let values = Raster::from_fn(w, h, |x, y| t.data()[y * pw + x] as f64);
    let mask = values.map(|&z| z > 0.0);
    DepthMap::new(values, mask)
}

/// `mean_valid|D − D_gt| + alpha·gradient term`, where validity is the
/// intersection of both masks and the gradient term is the mean over valid
/// horizontal forward-difference pairs plus the mean over valid vertical pairs.
pub fn stage2_loss(d: &DepthMap, d_gt: &DepthMap, alpha: f64) -> Result<f64> {
    if d.values.dims() != d_gt.values.dims() {
        return Err(NslError::Shape(
            "prediction and ground truth differ in size".into(),
        ));
    }
    let m = d.mask.and(&d_gt.mask)?;
    let n = m.count();
    if n == 0 {
        return Err(NslError::EmptyMask("stage-2 loss".into()));
    }
    let (w, h) = m.dims();
    let e = Raster::from_fn(w, h, |x, y| d.values.at(x, y) - d_gt.values.at(x, y));
    let l1 = e
        .iter()
        .zip(m.iter())
        .filter(|(_, &v)| v)
        .map(|(e, _)| e.abs())
        .sum::<f64>()
        / n as f64;
    let mut grad = 0.0;
    for (dx, dy) in [(1usize, 0usize), (0, 1)] {
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in 0..h - dy {
            for x in 0..w - dx {
                if m.at(x, y) && m.at(x + dx, y + dy) {
                    acc += (e.at(x + dx, y + dy) - e.at(x, y)).abs();
                    count += 1;
                }
            }
        }
        if count > 0 {
            grad += acc / count as f64;
        }
    }
    Ok(l1 + alpha * grad)
}

/// Graph form of [`stage2_loss`] with a mask tensor.
pub fn stage2_loss_op<T: Real>(
    g: &Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    mask: &Tensor<T>,
    alpha: f64,
) -> Var {
    let l1 = g.masked_l1(pred, target, mask);
    if alpha == 0.0 {
        return l1;
    }
    let grad = g.gradient_l1(pred, target, mask);
    g.weighted_sum(&[(l1, T::ONE), (grad, T::from_f64(alpha))])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub steps: usize,
    pub batch: usize,
    /// Plateau learning rate of the decoder, prompt network and head.
    pub lr: f64,
    /// Backbone learning rate as a fraction of `lr`.
    pub backbone_lr_ratio: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub crop: Option<[usize; 2]>,
    pub intensity_jitter: f64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 4,
            lr: 5e-4,
            backbone_lr_ratio: 0.1,
            warmup_steps: 1000,
            weight_decay: 1e-5,
            clip_norm: 0.8,
            crop: None,
            intensity_jitter: 0.0,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(NslError::Config("steps and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0 && self.backbone_lr_ratio > 0.0) {
            return Err(NslError::Config(
                "learning rates and clip_norm must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.intensity_jitter) {
            return Err(NslError::Config(
                "intensity_jitter must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate of parameter `name` at `step`.
    pub fn lr_for(&self, name: &str, step: usize) -> f64 {
        let base = LinearWarmup {
            plateau: self.lr,
            warmup_steps: self.warmup_steps,
        }
        .lr(step);
        if name.starts_with("enc.") {
            base * self.backbone_lr_ratio
        } else {
            base
        }
    }
}

/// Stage-1 depth of every sample, the refiner's initial estimate.
pub fn initial_depths(stage1: &MatcherParams, samples: &[Sample]) -> Result<Vec<DepthMap>> {
    samples
        .par_iter()
        .map(|s| stage1.predict(s, None).map(|p| p.depth))
        .collect()
}

fn crop_depth(v: &View<'_>, d: &DepthMap) -> DepthMap {
    DepthMap {
        values: d.values.crop(v.x0, v.y0, v.w, v.h).expect("crop in range"),
        mask: d.mask.crop(v.x0, v.y0, v.w, v.h).expect("crop in range"),
    }
}

/// Padded target and mask tensors for a batch of depth maps.
pub fn pack_depth_targets<T: Real>(
    maps: &[&DepthMap],
    padded: (usize, usize),
) -> (Tensor<T>, Tensor<T>) {
    let (pw, ph) = padded;
    let mut vals = Vec::with_capacity(maps.len() * pw * ph);
    let mut mask = Vec::with_capacity(maps.len() * pw * ph);
    for m in maps {
        for y in 0..ph {
            for x in 0..pw {
                let v = if x < m.width() && y < m.height() {
                    m.valid_at(x, y)
                } else {
                    None
                };
                vals.push(T::from_f64(v.unwrap_or(0.0)));
                mask.push(if v.is_some() { T::ONE } else { T::ZERO });
            }
        }
    }
    let shape = vec![maps.len(), 1, ph, pw];
    (Tensor::new(shape.clone(), vals), Tensor::new(shape, mask))
}

/// Train the refiner on stage-1 estimates from the frozen `stage1` model.
/// Learning rates ramp linearly over the warmup and then stay constant; the
/// backbone runs at `backbone_lr_ratio` of the rest.
pub fn train_stage2(
    samples: &[Sample],
    stage1: &MatcherParams,
    init: RefinerParams,
    tc: &Stage2Config,
    on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome<RefinerParams>> {
    if samples.is_empty() {
        return Err(NslError::Config("training set is empty".into()));
    }
    let d_init = initial_depths(stage1, samples)?;
    train_stage2_with(samples, &d_init, init, tc, on_step)
}

/// [`train_stage2`] with precomputed initial depths, one per sample.
pub fn train_stage2_with(
    samples: &[Sample],
    d_init: &[DepthMap],
    init: RefinerParams,
    tc: &Stage2Config,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome<RefinerParams>> {
    tc.validate()?;
    init.config.validate()?;
    if samples.is_empty() || samples.len() != d_init.len() {
        return Err(NslError::Config(
            "need one initial depth per training sample".into(),
        ));
    }
    let cfg = init.config.clone();
    let mut params = init;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: tc.weight_decay,
        ..AdamWConfig::default()
    });
    let mut history = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let views = draw_views(
            samples,
            tc.batch,
            tc.crop,
            tc.intensity_jitter,
            tc.seed,
            "train.stage2.batch",
            step,
        )?;
        let index = |v: &View<'_>| {
            samples
                .iter()
                .position(|s| std::ptr::eq(s, v.sample))
                .expect("view of a training sample")
        };
        let images: Vec<Image> = views
            .iter()
            .map(|v| v.image(&v.sample.ir_left, v.gain))
            .collect();
        let inits: Vec<DepthMap> = views
            .iter()
            .map(|v| crop_depth(v, &d_init[index(v)]))
            .collect();
        let gts: Vec<DepthMap> = views
            .iter()
            .map(|v| crop_depth(v, &v.sample.depth_gt))
            .collect();
        let image = pack_images::<f32>(&images.iter().collect::<Vec<_>>())?;
        let prompt = pack_prompts::<f32>(&inits.iter().collect::<Vec<_>>())?;
        let padded = (image.shape()[3], image.shape()[2]);
        let (target, mask) = pack_depth_targets::<f32>(&gts.iter().collect::<Vec<_>>(), padded);
        if !mask.data().iter().any(|&m| m > 0.0) {
            continue;
        }
        let g = Graph::<f32>::new();
        let bind = params.params.bind(&g, true);
        let net = Net { g: &g, p: &bind };
        let x = g.constant(image);
        let pr = g.constant(prompt);
        let pred = refine_op(&net, &cfg, x, pr);
        let loss = stage2_loss_op(&g, pred, &target, &mask, cfg.alpha);
        let loss_value = g.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Ok(TrainOutcome {
                params,
                history,
                aborted: Some(format!("non-finite loss at step {step}")),
            });
        }
        let mut grads = collect_grads(&g, loss, &bind);
        let grad_norm = clip_global_norm(&mut grads, tc.clip_norm);
        if !grad_norm.is_finite() {
            return Ok(TrainOutcome {
                params,
                history,
                aborted: Some(format!("non-finite gradient at step {step}")),
            });
        }
        let rec = LossRecord {
            step,
            loss: loss_value,
            lr: tc.lr_for("dec", step),
            grad_norm,
            clipped_norm: global_norm(&grads),
        };
        let before = params.params.clone();
        opt.step(&mut params.params, &grads, |name| tc.lr_for(name, step));
        if !params.params.all_finite() {
            params.params = before;
            history.push(rec);
            return Ok(TrainOutcome {
                params,
                history,
                aborted: Some(format!("non-finite parameters after step {step}")),
            });
        }
        on_step(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome {
        params,
        history,
        aborted: None,
    })
}

fn collect_grads<T: Real>(g: &Graph<T>, loss: Var, bind: &Binding) -> BTreeMap<String, Vec<T>> {
    let mut out = g.backward(loss);
    bind.iter()
        .filter_map(|(name, v)| out.take(v).map(|gv| (name.to_string(), gv)))
        .collect()
}
