//! Learned correspondence matcher: siamese feature encoders, an all-pairs
//! correlation pyramid, and a three-scale convolutional GRU that refines a
//! disparity field from zero.

mod train;
mod volume;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Tensor, Var};
use crate::error::{NslError, Result};
use crate::geometry::{disparity_to_depth, DepthMap, DisparityMap, Pairing, RigCalibration};
use crate::nn::{Binding, Initializer, Net, ParamStore};
use crate::raster::{Image, Raster};
use crate::simulator::Sample;

pub(crate) use train::{draw_views, View};
pub use train::{evaluate_epe, train_stage1, LossRecord, TrainConfig, TrainOutcome};
pub use volume::{
    build_cost_volume, build_pyramid, convex_upsample_op, cost_volume_op, lookup, lookup_op,
    pool_last_op, pyramid_op,
};

/// Input configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatcherMode {
    /// Left IR against the projected pattern.
    Mono,
    /// Left IR against right IR.
    Stereo,
    /// Both pairs, lookup features concatenated.
    Bino,
}

impl MatcherMode {
    pub const ALL: [MatcherMode; 3] = [MatcherMode::Mono, MatcherMode::Stereo, MatcherMode::Bino];

    pub fn name(self) -> &'static str {
        match self {
            MatcherMode::Mono => "mono",
            MatcherMode::Stereo => "stereo",
            MatcherMode::Bino => "bino",
        }
    }

    /// Pair whose disparity the matcher regresses.
    pub fn pairing(self) -> Pairing {
        match self {
            MatcherMode::Mono => Pairing::CameraProjector,
            MatcherMode::Stereo | MatcherMode::Bino => Pairing::CameraCamera,
        }
    }

    /// Ground-truth disparity this mode is supervised with.
    pub fn target(self, sample: &Sample) -> &DisparityMap {
        match self.pairing() {
            Pairing::CameraProjector => &sample.disp_gt_lp,
            Pairing::CameraCamera => &sample.disp_gt_lr,
        }
    }
}

impl std::str::FromStr for MatcherMode {
    type Err = NslError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mono" => Ok(MatcherMode::Mono),
            "stereo" => Ok(MatcherMode::Stereo),
            "bino" => Ok(MatcherMode::Bino),
            _ => Err(NslError::Config(format!("unknown matcher mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for MatcherMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// Learned 3×3 convex combination.
    Convex,
    /// Plain bilinear interpolation (no mask head).
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatcherConfig {
    pub mode: MatcherMode,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub downsample: usize,
    pub pyramid_levels: usize,
    pub iters_train: usize,
    pub iters_eval: usize,
    pub lookup_radius: usize,
    /// Context feature strides; fixed to 4, 8 and 16.
    pub context_scales: Vec<usize>,
    pub loss_gamma: f64,
    pub upsample: Upsample,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            mode: MatcherMode::Mono,
            feature_dim: 64,
            hidden_dim: 32,
            downsample: 4,
            pyramid_levels: 4,
            iters_train: 12,
            iters_eval: 8,
            lookup_radius: 4,
            context_scales: vec![4, 8, 16],
            loss_gamma: 0.9,
            upsample: Upsample::Convex,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NslError::Config(m));
        if self.downsample != 4 {
            return bad(format!("downsample must be 4, got {}", self.downsample));
        }
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels must be at least 1".into());
        }
        if self.iters_train == 0 || self.iters_eval == 0 {
            return bad("iteration counts must be at least 1".into());
        }
        if self.context_scales != [4, 8, 16] {
            return bad(format!(
                "context_scales must be [4, 8, 16], got {:?}",
                self.context_scales
            ));
        }
        if self.feature_dim == 0 || self.hidden_dim < 4 {
            return bad("feature_dim must be positive and hidden_dim at least 4".into());
        }
        if !(self.loss_gamma > 0.0 && self.loss_gamma <= 1.0) {
            return bad("loss_gamma must be in (0, 1]".into());
        }
        Ok(())
    }

    /// Correlation channels per lookup (both pyramids in bino mode).
    pub fn corr_channels(&self) -> usize {
        let per = self.pyramid_levels * (2 * self.lookup_radius + 1);
        if self.mode == MatcherMode::Bino {
            2 * per
        } else {
            per
        }
    }

    fn stem_dim(&self) -> usize {
        (self.feature_dim / 2).max(8)
    }
}

/// Trained (or freshly initialized) matcher weights with their config.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams {
    pub config: MatcherConfig,
    pub params: ParamStore<f32>,
}

impl MatcherParams {
    pub fn init(config: MatcherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = layout(&config, seed);
        Ok(Self { config, params })
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Result<crate::checkpoint::Checkpoint> {
        Ok(crate::checkpoint::Checkpoint {
            kind: "matcher".into(),
            step,
            seed,
            config: serde_json::to_value(&self.config)?,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(c: &crate::checkpoint::Checkpoint) -> Result<Self> {
        if c.kind != "matcher" {
            return Err(NslError::Config(format!(
                "checkpoint holds a {}, not a matcher",
                c.kind
            )));
        }
        let config: MatcherConfig = serde_json::from_value(c.config.clone())?;
        config.validate()?;
        c.params.check_layout(&layout(&config, 0))?;
        Ok(Self {
            config,
            params: c.params.clone(),
        })
    }
}

fn encoder_layout(init: &mut Initializer, prefix: &str, cfg: &MatcherConfig) {
    let (c1, fd) = (cfg.stem_dim(), cfg.feature_dim);
    init.conv(&format!("{prefix}.conv1"), c1, 1, 3);
    init.conv(&format!("{prefix}.conv2"), fd, c1, 3);
    init.conv(&format!("{prefix}.res_a"), fd, fd, 3);
    init.conv(&format!("{prefix}.res_b"), fd, fd, 3);
    init.conv(&format!("{prefix}.out"), fd, fd, 1);
}

fn layout(cfg: &MatcherConfig, seed: u64) -> ParamStore<f32> {
    let mut init = Initializer::new(seed, "matcher.init");
    let hd = cfg.hidden_dim;
    if cfg.mode != MatcherMode::Stereo {
        encoder_layout(&mut init, "enc_lp", cfg);
    }
    if cfg.mode != MatcherMode::Mono {
        encoder_layout(&mut init, "enc_lr", cfg);
    }
    init.conv("ctx.conv1", cfg.stem_dim(), 1, 3);
    init.conv("ctx.conv2", hd, cfg.stem_dim(), 3);
    init.conv("ctx.head4", 2 * hd, hd, 3);
    init.conv("ctx.down8", hd, hd, 3);
    init.conv("ctx.head8", 2 * hd, hd, 3);
    init.conv("ctx.down16", hd, hd, 3);
    init.conv("ctx.head16", 2 * hd, hd, 3);
    init.conv("motion.corr", 2 * hd, cfg.corr_channels(), 1);
    init.conv("motion.disp", hd / 2, 1, 3);
    init.conv("motion.fuse", hd - 1, 2 * hd + hd / 2, 3);
    for (name, inputs) in [("gru4", 3), ("gru8", 3), ("gru16", 2)] {
        init.conv(&format!("{name}.zr"), 2 * hd, hd * (1 + inputs), 3);
        init.conv(&format!("{name}.q"), hd, hd * (1 + inputs), 3);
    }
    init.conv("head.c1", hd, hd, 3);
    init.conv_scaled("head.c2", 1, hd, 3, 0.1);
    if cfg.upsample == Upsample::Convex {
        init.conv("mask.c1", hd, hd, 3);
        init.conv_scaled("mask.c2", 144, hd, 1, 0.1);
    }
    init.finish()
}

/// Batched network input, padded to a multiple of 16.
#[derive(Debug, Clone)]
pub struct MatcherInput<T: Real> {
    pub left: Tensor<T>,
    pub pattern: Option<Tensor<T>>,
    pub right: Option<Tensor<T>>,
    /// `baseline_lp / baseline_lr` per batch item.
    pub lp_per_lr: Vec<f64>,
    /// Unpadded `(width, height)`.
    pub size: (usize, usize),
}

fn pad16(n: usize) -> usize {
    n.div_ceil(16) * 16
}

/// Pack images into `[N, 1, H', W']` with edge-replicate padding and the
/// `[0,1] → [-1,1]` normalization.
pub fn pack_images<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let (w, h) = images
        .first()
        .ok_or_else(|| NslError::Shape("empty batch".into()))?
        .dims();
    let (pw, ph) = (pad16(w), pad16(h));
    let mut data = Vec::with_capacity(images.len() * pw * ph);
    for img in images {
        if img.dims() != (w, h) {
            return Err(NslError::Shape("batch images differ in size".into()));
        }
        for y in 0..ph {
            for x in 0..pw {
                let v = img.at(x.min(w - 1), y.min(h - 1));
                data.push(T::from_f64(2.0 * v - 1.0));
            }
        }
    }
    Ok(Tensor::new(vec![images.len(), 1, ph, pw], data))
}

impl<T: Real> MatcherInput<T> {
    /// Gather the inputs `mode` needs from raw images.
    pub fn new(
        mode: MatcherMode,
        left: &[&Image],
        pattern: Option<&[&Image]>,
        right: Option<&[&Image]>,
        lp_per_lr: Vec<f64>,
    ) -> Result<Self> {
        let need = |what: &str| NslError::Mode {
            mode: mode.name().into(),
            what: what.into(),
        };
        let size = left.first().map(|i| i.dims()).unwrap_or((0, 0));
        let pattern = match mode {
            MatcherMode::Mono | MatcherMode::Bino => Some(pack_images(
                pattern.ok_or_else(|| need("projected pattern"))?,
            )?),
            MatcherMode::Stereo => None,
        };
        let right = match mode {
            MatcherMode::Stereo | MatcherMode::Bino => {
                Some(pack_images(right.ok_or_else(|| need("right IR image"))?)?)
            }
            MatcherMode::Mono => None,
        };
        let left = pack_images(left)?;
        for t in pattern.iter().chain(right.iter()) {
            if t.shape() != left.shape() {
                return Err(NslError::Shape("matcher inputs differ in size".into()));
            }
        }
        if lp_per_lr.len() != left.shape()[0] {
            return Err(NslError::Shape("one baseline ratio per batch item".into()));
        }
        Ok(Self {
            left,
            pattern,
            right,
            lp_per_lr,
            size,
        })
    }

    pub fn from_samples(mode: MatcherMode, samples: &[&Sample]) -> Result<Self> {
        let left: Vec<&Image> = samples.iter().map(|s| &s.ir_left).collect();
        let pattern: Vec<&Image> = samples.iter().map(|s| &s.pattern_ref.intensities).collect();
        let right: Vec<&Image> = samples.iter().map(|s| &s.ir_right).collect();
        let ratio = samples
            .iter()
            .map(|s| s.rig.baseline_lp / s.rig.baseline_lr)
            .collect();
        Self::new(mode, &left, Some(&pattern), Some(&right), ratio)
    }

    pub fn batch(&self) -> usize {
        self.left.shape()[0]
    }

    /// Padded `(width, height)`.
    pub fn padded_size(&self) -> (usize, usize) {
        (self.left.shape()[3], self.left.shape()[2])
    }
}

/// Feature encoder: two stride-2 stages with instance norm, one residual
/// block at 1/4 resolution, and a 1×1 projection.
pub fn encode_features_op<T: Real>(net: &Net<'_, T>, prefix: &str, image: Var) -> Var {
    let g = net.g;
    let x = net.conv3_norm_relu(&format!("{prefix}.conv1"), image, true);
    let x = net.conv3_norm_relu(&format!("{prefix}.conv2"), x, true);
    let y = net.conv3_norm_relu(&format!("{prefix}.res_a"), x, false);
    let y = net.conv3(&format!("{prefix}.res_b"), y, false);
    let y = g.instance_norm(y, T::from_f64(1e-5));
    let s = g.add(x, y);
    let x = g.relu(s);
    net.conv1(&format!("{prefix}.out"), x)
}

/// Per-scale GRU initial state and context input.
pub struct ContextFeatures {
    /// Hidden state at 1/4, 1/8, 1/16.
    pub hidden: [Var; 3],
    pub context: [Var; 3],
}

/// Context encoder (no normalization) at strides 4, 8 and 16.
pub fn encode_context_op<T: Real>(net: &Net<'_, T>, image: Var, hd: usize) -> ContextFeatures {
    let g = net.g;
    let x = net.conv3_relu("ctx.conv1", image, true);
    let x4 = net.conv3_relu("ctx.conv2", x, true);
    let x8 = net.conv3_relu("ctx.down8", x4, true);
    let x16 = net.conv3_relu("ctx.down16", x8, true);
    let split = |name: &str, x: Var| -> (Var, Var) {
        let y = net.conv3(name, x, false);
        let h = g.slice_channels(y, 0, hd);
        let c = g.slice_channels(y, hd, hd);
        (g.tanh(h), g.relu(c))
    };
    let (h4, c4) = split("ctx.head4", x4);
    let (h8, c8) = split("ctx.head8", x8);
    let (h16, c16) = split("ctx.head16", x16);
    ContextFeatures {
        hidden: [h4, h8, h16],
        context: [c4, c8, c16],
    }
}

/// One convolutional GRU step; `x` are the inputs besides the hidden state.
pub fn gru_update_op<T: Real>(net: &Net<'_, T>, name: &str, h: Var, x: &[Var]) -> Var {
    let g = net.g;
    let hd = g.shape(h)[1];
    let mut parts = vec![h];
    parts.extend_from_slice(x);
    let hx = g.concat_channels(&parts);
    let zr = net.conv3(&format!("{name}.zr"), hx, false);
    let zr = g.sigmoid(zr);
    let z = g.slice_channels(zr, 0, hd);
    let r = g.slice_channels(zr, hd, hd);
    let rh = g.mul(r, h);
    parts[0] = rh;
    let rx = g.concat_channels(&parts);
    let q = net.conv3(&format!("{name}.q"), rx, false);
    let q = g.tanh(q);
    let diff = g.sub(q, h);
    let step = g.mul(z, diff);
    g.add(h, step)
}

/// Δd from the finest hidden state.
pub fn regress_delta_op<T: Real>(net: &Net<'_, T>, h4: Var) -> Var {
    let y = net.conv3_relu("head.c1", h4, false);
    net.conv3("head.c2", y, false)
}

fn motion_features<T: Real>(net: &Net<'_, T>, corr: Var, d: Var) -> Var {
    let g = net.g;
    let c = net.conv1("motion.corr", corr);
    let c = g.relu(c);
    let dd = net.conv3_relu("motion.disp", d, false);
    let cat = g.concat_channels(&[c, dd]);
    let m = net.conv3_relu("motion.fuse", cat, false);
    g.concat_channels(&[m, d])
}

/// Result of [`forward_op`].
pub struct ForwardVars {
    /// Full-resolution (padded) disparities `d_1..d_N`, each `[N,1,H',W']`.
    pub sequence: Vec<Var>,
    /// Final 1/4-resolution state.
    pub coarse: Var,
    /// Lookup features of the first iteration.
    pub first_lookup: Var,
}

/// Run the recurrent matcher for `iters` steps. With `detach_lookup`, the
/// lookup position carries no gradient (the usual training convention).
pub fn forward_op<T: Real>(
    g: &Graph<T>,
    p: &Binding,
    cfg: &MatcherConfig,
    input: &MatcherInput<T>,
    iters: usize,
    detach_lookup: bool,
) -> Result<ForwardVars> {
    cfg.validate()?;
    let net = Net { g, p };
    let hd = cfg.hidden_dim;
    let n = input.batch();
    let left = g.constant(input.left.clone());
    let inv_sqrt = T::from_f64(1.0 / (cfg.feature_dim as f64).sqrt());
    let mut pyramids: Vec<(Vec<Var>, Vec<f64>)> = Vec::new();
    let mut pair = |prefix: &str, other: &Tensor<T>, scale: Vec<f64>| -> Result<()> {
        let fl = encode_features_op(&net, prefix, left);
        let other = g.constant(other.clone());
        let fr = encode_features_op(&net, prefix, other);
        let fl = g.affine(fl, inv_sqrt, T::ZERO);
        let c = cost_volume_op(g, fl, fr)?;
        pyramids.push((pyramid_op(g, c, cfg.pyramid_levels)?, scale));
        Ok(())
    };
    let need = |what: &str| NslError::Mode {
        mode: cfg.mode.name().into(),
        what: what.into(),
    };
    match cfg.mode {
        MatcherMode::Mono => {
            let pat = input
                .pattern
                .as_ref()
                .ok_or_else(|| need("projected pattern"))?;
            pair("enc_lp", pat, vec![1.0; n])?;
        }
        MatcherMode::Stereo => {
            let right = input.right.as_ref().ok_or_else(|| need("right IR image"))?;
            pair("enc_lr", right, vec![1.0; n])?;
        }
        MatcherMode::Bino => {
            let right = input.right.as_ref().ok_or_else(|| need("right IR image"))?;
            let pat = input
                .pattern
                .as_ref()
                .ok_or_else(|| need("projected pattern"))?;
            pair("enc_lr", right, vec![1.0; n])?;
            pair("enc_lp", pat, input.lp_per_lr.clone())?;
        }
    }
    let ctx = encode_context_op(&net, left, hd);
    let [mut h4, mut h8, mut h16] = ctx.hidden;
    let [c4, c8, c16] = ctx.context;
    let (_, _, ph4, pw4) = g.value(c4).dims4();
    let mut d = g.constant(Tensor::zeros(vec![n, 1, ph4, pw4]));
    let mut sequence = Vec::with_capacity(iters);
    let mut first_lookup = None;
    for _ in 0..iters {
        let pos = if detach_lookup { g.detach(d) } else { d };
        let feats: Vec<Var> = pyramids
            .iter()
            .map(|(levels, scale)| lookup_op(g, levels, pos, cfg.lookup_radius, scale))
            .collect();
        let corr = if feats.len() == 1 {
            feats[0]
        } else {
            g.concat_channels(&feats)
        };
        first_lookup.get_or_insert(corr);

        let down8 = net.resize_like(h8, c16);
        h16 = gru_update_op(&net, "gru16", h16, &[c16, down8]);
        let down4 = net.resize_like(h4, c8);
        let up16 = net.resize_like(h16, c8);
        h8 = gru_update_op(&net, "gru8", h8, &[c8, down4, up16]);
        let motion = motion_features(&net, corr, d);
        let up8 = net.resize_like(h8, c4);
        h4 = gru_update_op(&net, "gru4", h4, &[c4, motion, up8]);

        let delta = regress_delta_op(&net, h4);
        d = g.add(d, delta);
        let full = match cfg.upsample {
            Upsample::Convex => {
                let m = net.conv3_relu("mask.c1", h4, false);
                let m = net.conv1("mask.c2", m);
                let m = g.affine(m, T::from_f64(0.25), T::ZERO);
                convex_upsample_op(g, m, d, 4)
            }
            Upsample::Bilinear => {
                let (pw, ph) = input.padded_size();
                let up = g.resize_bilinear(d, ph, pw);
                g.affine(up, T::from_f64(4.0), T::ZERO)
            }
        };
        sequence.push(full);
    }
    Ok(ForwardVars {
        sequence,
        coarse: d,
        first_lookup: first_lookup.expect("at least one iteration"),
    })
}

/// Padded `[N,1,H',W']` target and mask tensors for a batch of disparities.
pub fn pack_targets<T: Real>(
    maps: &[&DisparityMap],
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

/// `Σ_t γ^(N−t)·mean_valid|d_t − d_gt|` on the graph.
pub fn sequence_loss_op<T: Real>(
    g: &Graph<T>,
    seq: &[Var],
    target: &Tensor<T>,
    mask: &Tensor<T>,
    gamma: f64,
) -> Result<Var> {
    if seq.is_empty() {
        return Err(NslError::Config("empty prediction sequence".into()));
    }
    if !mask.data().iter().any(|&m| m > T::ZERO) {
        return Err(NslError::EmptyMask("sequence loss ground truth".into()));
    }
    let n = seq.len();
    let terms: Vec<(Var, T)> = seq
        .iter()
        .enumerate()
        .map(|(t, &d)| {
            (
                g.masked_l1(d, target, mask),
                T::from_f64(gamma.powi((n - 1 - t) as i32)),
            )
        })
        .collect();
    Ok(g.weighted_sum(&terms))
}

/// Sequence loss of plain rasters against a disparity map.
pub fn sequence_loss(seq: &[Raster<f64>], gt: &DisparityMap, gamma: f64) -> Result<f64> {
    if seq.is_empty() {
        return Err(NslError::Config("empty prediction sequence".into()));
    }
    if gt.valid_count() == 0 {
        return Err(NslError::EmptyMask("sequence loss ground truth".into()));
    }
    let n = seq.len();
    let mut total = 0.0;
    for (t, d) in seq.iter().enumerate() {
        if d.dims() != gt.values.dims() {
            return Err(NslError::Shape(
                "prediction and ground truth differ in size".into(),
            ));
        }
        let mut acc = 0.0;
        for ((&p, &v), &m) in d.iter().zip(gt.values.iter()).zip(gt.mask.iter()) {
            if m {
                acc += (p - v).abs();
            }
        }
        total += gamma.powi((n - 1 - t) as i32) * acc / gt.valid_count() as f64;
    }
    Ok(total)
}

/// Matcher output for one sample.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Full-resolution disparities of every iteration.
    pub sequence: Vec<DisparityMap>,
    /// Depth from the last disparity using the mode's baseline.
    pub depth: DepthMap,
}

impl Prediction {
    pub fn disparity(&self) -> &DisparityMap {
        self.sequence.last().expect("non-empty sequence")
    }
}

fn crop_to_map(t: &Tensor<f32>, b: usize, size: (usize, usize)) -> DisparityMap {
    let (_, _, ph, pw) = t.dims4();
    let base = b * ph * pw;
    let values = Raster::from_fn(size.0, size.1, |x, y| t.data()[base + y * pw + x] as f64);
    DisparityMap::dense(values)
}

impl MatcherParams {
    /// Run inference with `iters` iterations (default: `iters_eval`).
    pub fn predict(&self, sample: &Sample, iters: Option<usize>) -> Result<Prediction> {
        let input = MatcherInput::<f32>::from_samples(self.config.mode, &[sample])?;
        let mut out = self.predict_batch(&input, iters)?;
        let seq = out.pop().expect("one item");
        let depth = disparity_to_depth(
            seq.last().expect("non-empty"),
            sample.rig.focal(),
            sample.rig.baseline(self.config.mode.pairing()),
        );
        Ok(Prediction {
            sequence: seq,
            depth,
        })
    }

    /// Per-item disparity sequences for a packed batch.
    pub fn predict_batch(
        &self,
        input: &MatcherInput<f32>,
        iters: Option<usize>,
    ) -> Result<Vec<Vec<DisparityMap>>> {
        let g = Graph::<f32>::new();
        let p = self.params.bind(&g, false);
        let iters = iters.unwrap_or(self.config.iters_eval);
        let fw = forward_op(&g, &p, &self.config, input, iters, true)?;
        let mut out = vec![Vec::with_capacity(iters); input.batch()];
        for &v in &fw.sequence {
            let t = g.value(v);
            if !t.all_finite() {
                return Err(NslError::NonFinite("matcher output".into()));
            }
            for (b, seq) in out.iter_mut().enumerate() {
                seq.push(crop_to_map(&t, b, input.size));
            }
        }
        Ok(out)
    }

    /// Features of `image` through the `lp` or `lr` encoder, `[1, D, H/4, W/4]`.
    pub fn encode_features(&self, image: &Image, pairing: Pairing) -> Result<Tensor<f32>> {
        let prefix = match pairing {
            Pairing::CameraProjector => "enc_lp",
            Pairing::CameraCamera => "enc_lr",
        };
        if self.params.get(&format!("{prefix}.out.w")).is_none() {
            return Err(NslError::Mode {
                mode: self.config.mode.name().into(),
                what: format!("{prefix} encoder"),
            });
        }
        let (w, h) = image.dims();
        if w % 4 != 0 || h % 4 != 0 {
            return Err(NslError::Shape(format!("{w}x{h} is not divisible by 4")));
        }
        let g = Graph::<f32>::new();
        let p = self.params.bind(&g, false);
        let x = g.constant(pack_images(&[image])?);
        let f = encode_features_op(&Net { g: &g, p: &p }, prefix, x);
        let t = g.value(f);
        let (_, c, ph, pw) = t.dims4();
        let (h4, w4) = (h / 4, w / 4);
        let mut data = Vec::with_capacity(c * h4 * w4);
        for ch in 0..c {
            for y in 0..h4 {
                data.extend_from_slice(&t.data()[(ch * ph + y) * pw..(ch * ph + y) * pw + w4]);
            }
        }
        let out = Tensor::new(vec![1, c, h4, w4], data);
        if !out.all_finite() {
            return Err(NslError::NonFinite("feature encoder".into()));
        }
        Ok(out)
    }

    /// Context hidden states and features at strides 4, 8, 16 for `image`.
    pub fn encode_context(&self, image: &Image) -> Result<[(Tensor<f32>, Tensor<f32>); 3]> {
        let g = Graph::<f32>::new();
        let p = self.params.bind(&g, false);
        let x = g.constant(pack_images(&[image])?);
        let c = encode_context_op(&Net { g: &g, p: &p }, x, self.config.hidden_dim);
        let (w, h) = image.dims();
        let out = std::array::from_fn(|i| {
            let s = 4 << i;
            let crop = |v: Var| crop_spatial(&g.value(v), h.div_ceil(s), w.div_ceil(s));
            (crop(c.hidden[i]), crop(c.context[i]))
        });
        for (a, b) in &out {
            if !(a.all_finite() && b.all_finite()) {
                return Err(NslError::NonFinite("context encoder".into()));
            }
        }
        Ok(out)
    }
}

fn crop_spatial<T: Real>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, ph, pw) = t.dims4();
    let mut data = Vec::with_capacity(n * c * h * w);
    for nc in 0..n * c {
        for y in 0..h {
            let row = (nc * ph + y) * pw;
            data.extend_from_slice(&t.data()[row..row + w]);
        }
    }
    Tensor::new(vec![n, c, h, w], data)
}

/// Depth of a disparity field for `mode` on `rig`.
pub fn depth_for_mode(d: &DisparityMap, rig: &RigCalibration, mode: MatcherMode) -> DepthMap {
    disparity_to_depth(d, rig.focal(), rig.baseline(mode.pairing()))
}
