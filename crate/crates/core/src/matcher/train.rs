//! Stage-1 optimization loop.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    forward_op, pack_targets, sequence_loss_op, MatcherConfig, MatcherInput, MatcherParams,
};
use crate::autograd::Graph;
use crate::error::{NslError, Result};
use crate::geometry::DisparityMap;
use crate::optim::{clip_global_norm, global_norm, AdamW, AdamWConfig, OneCycle};
use crate::raster::Image;
use crate::rng;
use crate::simulator::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub pct_start: f64,
    /// Random training crop `[width, height]`; whole images when absent.
    pub crop: Option<[usize; 2]>,
    /// Maximum relative IR gain perturbation.
    pub intensity_jitter: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 4,
            lr: 2e-4,
            weight_decay: 1e-5,
            clip_norm: 0.8,
            pct_start: 0.05,
            crop: None,
            intensity_jitter: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(NslError::Config("steps and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0) {
            return Err(NslError::Config("lr and clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.intensity_jitter) {
            return Err(NslError::Config(
                "intensity_jitter must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<P> {
    /// Last parameters with a finite loss.
    pub params: P,
    pub history: Vec<LossRecord>,
    /// Reason training stopped early, if it did.
    pub aborted: Option<String>,
}

/// Training view of one sample: a crop window plus IR gain.
pub(crate) struct View<'a> {
    pub sample: &'a Sample,
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub gain: f64,
}

impl View<'_> {
    pub fn image(&self, img: &Image, gain: f64) -> Image {
        Image::from_fn(self.w, self.h, |x, y| {
            (img.at(self.x0 + x, self.y0 + y) * gain).clamp(0.0, 1.0)
        })
    }

    pub fn disparity(&self, d: &DisparityMap) -> DisparityMap {
        DisparityMap {
            values: d
                .values
                .crop(self.x0, self.y0, self.w, self.h)
                .expect("crop in range"),
            mask: d
                .mask
                .crop(self.x0, self.y0, self.w, self.h)
                .expect("crop in range"),
        }
    }
}

/// Random batch for `step`, independent of earlier steps.
pub(crate) fn draw_views<'a>(
    samples: &'a [Sample],
    batch: usize,
    crop: Option<[usize; 2]>,
    jitter: f64,
    seed: u64,
    label: &str,
    step: usize,
) -> Result<Vec<View<'a>>> {
    let mut r = rng::indexed_stream(seed, label, step as u64);
    (0..batch)
        .map(|_| {
            let sample = &samples[r.random_range(0..samples.len())];
            let (sw, sh) = (sample.width(), sample.height());
            let [w, h] = crop.unwrap_or([sw, sh]);
            if w > sw || h > sh {
                return Err(NslError::Config(format!(
                    "crop {w}x{h} exceeds sample {sw}x{sh}"
                )));
            }
            let x0 = r.random_range(0..=sw - w);
            let y0 = r.random_range(0..=sh - h);
            let gain = if jitter > 0.0 {
                r.random_range(1.0 - jitter..=1.0 + jitter)
            } else {
                1.0
            };
            Ok(View {
                sample,
                x0,
                y0,
                w,
                h,
                gain,
            })
        })
        .collect()
}

pub(crate) fn views_input(cfg: &MatcherConfig, views: &[View<'_>]) -> Result<MatcherInput<f32>> {
    let left: Vec<Image> = views
        .iter()
        .map(|v| v.image(&v.sample.ir_left, v.gain))
        .collect();
    let right: Vec<Image> = views
        .iter()
        .map(|v| v.image(&v.sample.ir_right, v.gain))
        .collect();
    let pattern: Vec<Image> = views
        .iter()
        .map(|v| v.image(&v.sample.pattern_ref.intensities, 1.0))
        .collect();
    let l: Vec<&Image> = left.iter().collect();
    let r: Vec<&Image> = right.iter().collect();
    let p: Vec<&Image> = pattern.iter().collect();
    let ratio = views
        .iter()
        .map(|v| v.sample.rig.baseline_lp / v.sample.rig.baseline_lr)
        .collect();
    MatcherInput::new(cfg.mode, &l, Some(&p), Some(&r), ratio)
}

/// Optimize matcher weights with AdamW under a one-cycle schedule and global
/// gradient-norm clipping. Stops early at the first non-finite loss or
/// gradient, returning the last finite parameters.
pub fn train_stage1(
    samples: &[Sample],
    init: MatcherParams,
    tc: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome<MatcherParams>> {
    tc.validate()?;
    init.config.validate()?;
    if samples.is_empty() {
        return Err(NslError::Config("training set is empty".into()));
    }
    let cfg = init.config.clone();
    let mut params = init;
    let sched = OneCycle {
        pct_start: tc.pct_start,
        ..OneCycle::new(tc.lr, tc.steps)
    };
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
            "train.stage1.batch",
            step,
        )?;
        let input = views_input(&cfg, &views)?;
        let gts: Vec<DisparityMap> = views
            .iter()
            .map(|v| v.disparity(cfg.mode.target(v.sample)))
            .collect();
        let gt_refs: Vec<&DisparityMap> = gts.iter().collect();
        let (target, mask) = pack_targets::<f32>(&gt_refs, input.padded_size());
        if !mask.data().iter().any(|&m| m > 0.0) {
            continue;
        }
        let g = Graph::<f32>::new();
        let bind = params.params.bind(&g, true);
        let fw = forward_op(&g, &bind, &cfg, &input, cfg.iters_train, true)?;
        let loss = sequence_loss_op(&g, &fw.sequence, &target, &mask, cfg.loss_gamma)?;
        let loss_value = g.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Ok(TrainOutcome {
                params,
                history,
                aborted: Some(format!("non-finite loss at step {step}")),
            });
        }
        let mut grads_out = g.backward(loss);
        let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for (name, v) in bind.iter() {
            if let Some(gv) = grads_out.take(v) {
                grads.insert(name.to_string(), gv);
            }
        }
        let grad_norm = clip_global_norm(&mut grads, tc.clip_norm);
        if !grad_norm.is_finite() {
            return Ok(TrainOutcome {
                params,
                history,
                aborted: Some(format!("non-finite gradient at step {step}")),
            });
        }
        let lr = sched.lr(step);
        let rec = LossRecord {
            step,
            loss: loss_value,
            lr,
            grad_norm,
            clipped_norm: global_norm(&grads),
        };
        let before = params.params.clone();
        opt.step(&mut params.params, &grads, |_| lr);
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

/// Mean over samples of the per-image endpoint error on valid ground truth.
pub fn evaluate_epe(
    params: &MatcherParams,
    samples: &[Sample],
    iters: Option<usize>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(NslError::Config("evaluation set is empty".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let pred = params.predict(s, iters)?;
        let gt = params.config.mode.target(s);
        let d = pred.disparity();
        let mut acc = 0.0;
        let mut n = 0usize;
        for ((&p, &v), &m) in d.values.iter().zip(gt.values.iter()).zip(gt.mask.iter()) {
            if m {
                acc += (p - v).abs();
                n += 1;
            }
        }
        if n == 0 {
            return Err(NslError::EmptyMask(format!(
                "ground truth of sample seed {}",
                s.seed
            )));
        }
        total += acc / n as f64;
    }
    Ok(total / samples.len() as f64)
}
