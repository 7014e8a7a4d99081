//! Pixel-domain decoders: single-shot winner-take-all block matching (the
//! template-matching baseline) and multi-pattern temporal ZNCC decoding used
//! to build pseudo ground truth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NslError, Result};
use crate::geometry::{disparity_to_depth, DepthMap, DisparityMap};
use crate::raster::{Image, Raster, ValidityMask};

/// Sum of squared deviations at or below this (per element) counts as zero variance.
const ZERO_VARIANCE: f64 = 1e-12;

/// A temporal match is kept only if its score exceeds every other local
/// maximum along the row by this margin (repeated codes).
const TEMPORAL_UNIQUENESS: f64 = 0.05;

/// Score differences at or below this are ties in sub-pixel refinement.
const FLAT_SCORE: f64 = 1e-9;

/// Captured temporal codes with a standard deviation below this are treated
/// as unlit (projector shadow or outside the projected field).
const TEMPORAL_MIN_STD: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMetric {
    Zncc,
    Sad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockMatchConfig {
    pub window: usize,
    pub max_disp: usize,
    pub metric: MatchMetric,
    /// Left-right consistency tolerance in pixels; `None` disables the check.
    pub lrc_tol: Option<f64>,
    /// Minimum window variance of the base image.
    pub min_texture: f64,
}

impl Default for BlockMatchConfig {
    fn default() -> Self {
        Self {
            window: 9,
            max_disp: 40,
            metric: MatchMetric::Zncc,
            lrc_tol: Some(1.0),
            min_texture: 1e-6,
        }
    }
}

impl BlockMatchConfig {
    fn validate(&self, width: usize) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(NslError::Config(format!(
                "window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if self.max_disp < 1 {
            return Err(NslError::Config("max_disp must be >= 1".into()));
        }
        if self.max_disp >= width {
            return Err(NslError::Config(format!(
                "max_disp {} must be smaller than the image width {width}",
                self.max_disp
            )));
        }
        Ok(())
    }
}

/// Zero-normalized cross-correlation. `Ok(None)` when either input has zero variance.
pub fn zncc(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(NslError::Shape(format!(
            "zncc inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(NslError::Shape("zncc needs at least two elements".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= ZERO_VARIANCE * n || sbb <= ZERO_VARIANCE * n {
        return Ok(None);
    }
    Ok(Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)))
}

/// Per-pixel mean and centered L2 norm over a square window; `None` where the
/// window leaves the image.
struct WindowStats {
    mean: Vec<f64>,
    norm: Vec<f64>,
    var: Vec<f64>,
}

fn window_stats(img: &Image, r: usize) -> WindowStats {
    let (w, h) = img.dims();
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut mean = vec![f64::NAN; w * h];
    let mut norm = vec![f64::NAN; w * h];
    let mut var = vec![f64::NAN; w * h];
    for y in r..h.saturating_sub(r) {
        for x in r..w.saturating_sub(r) {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for yy in y - r..=y + r {
                for &v in &img.row(yy)[x - r..=x + r] {
                    s += v;
                    s2 += v * v;
                }
            }
            let m = s / n;
            let ss = (s2 - s * m).max(0.0);
            mean[y * w + x] = m;
            norm[y * w + x] = ss.sqrt();
            var[y * w + x] = ss / n;
        }
    }
    WindowStats { mean, norm, var }
}

/// Parabola vertex offset in [-0.5, 0.5] from three equally spaced scores.
pub fn parabolic_offset(prev: f64, best: f64, next: f64) -> f64 {
    let denom = prev - 2.0 * best + next;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    (0.5 * (prev - next) / denom).clamp(-0.5, 0.5)
}

/// Best ZNCC between `a` (centered, unit norm) and the linear blend
/// `b0 + t (b1 - b0)` over `t` in `[0, 1]`; returns `(t, score)`.
///
/// The score is `(p + q t) / sqrt(A + 2 B t + C t^2)`, whose stationary point
/// has a closed form, so the maximum is exact rather than fitted. A score that
/// does not change across the cell (a lone dot entering the window) yields
/// the cell center.
fn blend_peak(a: &[f64], b0: &[f64], b1: &[f64]) -> Option<(f64, f64)> {
    let n = a.len() as f64;
    let m0 = b0.iter().sum::<f64>() / n;
    let md = b1.iter().zip(b0).map(|(p, q)| p - q).sum::<f64>() / n;
    let (mut p, mut q, mut aa, mut bb, mut cc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((&ai, &u), &v) in a.iter().zip(b0).zip(b1) {
        let (c0, cd) = (u - m0, v - u - md);
        p += ai * c0;
        q += ai * cd;
        aa += c0 * c0;
        bb += c0 * cd;
        cc += cd * cd;
    }
    let score = |t: f64| {
        let var = aa + 2.0 * bb * t + cc * t * t;
        (var > ZERO_VARIANCE * n).then(|| (p + q * t) / var.sqrt())
    };
    if let (Some(s0), Some(s1)) = (score(0.0), score(0.9)) {
        if (s0 - s1).abs() <= FLAT_SCORE && score(0.5).is_some_and(|m| (m - s0).abs() <= FLAT_SCORE)
        {
            return Some((0.5, s0));
        }
    }
    let den = q * bb - p * cc;
    let stationary = (den != 0.0)
        .then(|| (p * bb - q * aa) / den)
        .filter(|t| *t > 0.0 && *t < 1.0);
    [Some(0.0), Some(1.0), stationary]
        .into_iter()
        .flatten()
        .filter_map(|t| score(t).map(|s| (t, s)))
        .fold(None, |best: Option<(f64, f64)>, c| match best {
            Some(b) if b.1 >= c.1 => Some(b),
            _ => Some(c),
        })
}

/// Centered, unit-norm copy; `None` for zero variance.
fn unit_centered(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    (ss > ZERO_VARIANCE * n).then(|| {
        let inv = 1.0 / ss.sqrt();
        v.iter().map(|x| (x - m) * inv).collect()
    })
}

/// Sub-pixel ZNCC refinement of the integer winner `bd`: the counterpart
/// signal is linearly interpolated between `bd` and each integer neighbor
/// (`fetch(bd ± 1)`) and the exact maximum over both cells is kept.
fn refine_zncc(
    a: &[f64],
    bd: usize,
    best: f64,
    max_disp: usize,
    fetch: impl Fn(usize) -> Option<Vec<f64>>,
) -> f64 {
    let Some(b0) = fetch(bd) else {
        return bd as f64;
    };
    let cell = |d: usize, dir: f64| {
        let (t, sc) = blend_peak(a, &b0, &fetch(d)?)?;
        (t > 0.0).then_some((bd as f64 + dir * t, sc))
    };
    let up = (bd < max_disp).then(|| cell(bd + 1, 1.0)).flatten();
    let down = (bd > 0).then(|| cell(bd - 1, -1.0)).flatten();
    [up, down]
        .into_iter()
        .flatten()
        .filter(|&(_, sc)| sc >= best - FLAT_SCORE)
        .fold((bd as f64, f64::NEG_INFINITY), |acc, c| {
            if c.1 > acc.1 {
                c
            } else {
                acc
            }
        })
        .0
}

fn window(img: &Image, x: usize, y: usize, r: usize) -> Vec<f64> {
    (y - r..=y + r)
        .flat_map(|yy| img.row(yy)[x - r..=x + r].iter().copied())
        .collect()
}

/// Scan `other` for matches of `base` windows. `sign` is +1 when the
/// counterpart column is `x - d` (left reference view) and -1 when it is `x + d`.
/// For `sign = +1`, pixels whose candidate range leaves `other` are invalid.
fn scan(base: &Image, other: &Image, cfg: &BlockMatchConfig, sign: i64) -> DisparityMap {
    let (w, h) = base.dims();
    let r = cfg.window / 2;
    let bs = window_stats(base, r);
    let os = window_stats(other, r);
    let x_min = if sign > 0 { r + cfg.max_disp } else { r };
    let rows: Vec<Vec<(f64, bool)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut out = vec![(0.0, false); w];
            if y < r || y + r >= h {
                return out;
            }
            let mut scores = vec![f64::NAN; cfg.max_disp + 1];
            for x in x_min..w.saturating_sub(r) {
                let bi = y * w + x;
                if !(bs.var[bi] >= cfg.min_texture) || bs.norm[bi] <= 0.0 {
                    continue;
                }
                scores.iter_mut().for_each(|s| *s = f64::NAN);
                let mut best: Option<usize> = None;
                for d in 0..=cfg.max_disp {
                    let xo = x as i64 - sign * d as i64;
                    if xo < r as i64 || xo + r as i64 >= w as i64 {
                        continue;
                    }
                    let xo = xo as usize;
                    let oi = y * w + xo;
                    let score = match cfg.metric {
                        MatchMetric::Zncc => {
                            if !(os.var[oi] >= cfg.min_texture) || os.norm[oi] <= 0.0 {
                                continue;
                            }
                            let mut acc = 0.0;
                            for dy in 0..=2 * r {
                                let brow = &base.row(y + dy - r)[x - r..=x + r];
                                let orow = &other.row(y + dy - r)[xo - r..=xo + r];
                                acc += brow.iter().zip(orow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            let n = ((2 * r + 1) * (2 * r + 1)) as f64;
                            (acc - n * bs.mean[bi] * os.mean[oi]) / (bs.norm[bi] * os.norm[oi])
                        }
                        MatchMetric::Sad => {
                            let mut acc = 0.0;
                            for dy in 0..=2 * r {
                                let brow = &base.row(y + dy - r)[x - r..=x + r];
                                let orow = &other.row(y + dy - r)[xo - r..=xo + r];
                                acc += brow
                                    .iter()
                                    .zip(orow)
                                    .map(|(a, b)| (a - b).abs())
                                    .sum::<f64>();
                            }
                            // negate so larger is better for both metrics
                            -acc
                        }
                    };
                    scores[d] = score;
                    if best.is_none_or(|b| score > scores[b]) {
                        best = Some(d);
                    }
                }
                let Some(bd) = best else { continue };
                let disp = match cfg.metric {
                    MatchMetric::Zncc => {
                        let a = unit_centered(&window(base, x, y, r)).unwrap_or_default();
                        refine_zncc(&a, bd, scores[bd], cfg.max_disp, |d| {
                            let xo = x as i64 - sign * d as i64;
                            (xo >= r as i64 && xo + (r as i64) < w as i64)
                                .then(|| window(other, xo as usize, y, r))
                        })
                    }
                    MatchMetric::Sad => {
                        let (prev, next) = (scores.get(bd.wrapping_sub(1)), scores.get(bd + 1));
                        match (prev, next) {
                            (Some(&p), Some(&n)) if p.is_finite() && n.is_finite() => {
                                bd as f64 + parabolic_offset(p, scores[bd], n)
                            }
                            _ => bd as f64,
                        }
                    }
                };
                out[x] = (disp, true);
            }
            out
        })
        .collect();
    let mut values = Raster::filled(w, h, 0.0);
    let mut mask = ValidityMask::filled(w, h, false);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (d, ok)) in row.into_iter().enumerate() {
            values.set(x, y, d);
            mask.set(x, y, ok);
        }
    }
    DisparityMap { values, mask }
}

/// Winner-take-all block matching of `left` against a row-rectified `reference`.
pub fn block_match(
    left: &Image,
    reference: &Image,
    cfg: &BlockMatchConfig,
) -> Result<DisparityMap> {
    if left.dims() != reference.dims() {
        return Err(NslError::Shape(format!(
            "left {:?} and reference {:?} differ",
            left.dims(),
            reference.dims()
        )));
    }
    cfg.validate(left.width())?;
    let d_left = scan(left, reference, cfg, 1);
    match cfg.lrc_tol {
        None => Ok(d_left),
        Some(tol) => {
            let d_ref = scan(reference, left, cfg, -1);
            let keep = left_right_consistency(&d_left, &d_ref, tol)?;
            d_left.restrict(&keep)
        }
    }
}

/// Valid iff `|dL(x,y) - dR(x - round(dL), y)| <= tol` with an in-bounds lookup.
pub fn left_right_consistency(
    d_left: &DisparityMap,
    d_right: &DisparityMap,
    tol: f64,
) -> Result<ValidityMask> {
    if d_left.values.dims() != d_right.values.dims() {
        return Err(NslError::Shape("disparity maps differ in shape".into()));
    }
    let (w, h) = d_left.values.dims();
    Ok(ValidityMask::from_fn(w, h, |x, y| {
        let Some(dl) = d_left.valid_at(x, y) else {
            return false;
        };
        let xr = x as i64 - dl.round() as i64;
        if xr < 0 || xr >= w as i64 {
            return false;
        }
        d_right
            .valid_at(xr as usize, y)
            .is_some_and(|dr| (dl - dr).abs() <= tol)
    }))
}

/// Invalidate pixels whose largest 4-neighbor depth jump exceeds `grad_thresh`.
pub fn remove_depth_outliers(z: &DepthMap, grad_thresh: f64) -> ValidityMask {
    let (w, h) = z.values.dims();
    ValidityMask::from_fn(w, h, |x, y| {
        let Some(center) = z.valid_at(x, y) else {
            return false;
        };
        let neighbors = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        neighbors
            .iter()
            .filter(|&&(nx, ny)| nx < w && ny < h)
            .filter_map(|&(nx, ny)| z.valid_at(nx, ny))
            .all(|n| (n - center).abs() <= grad_thresh)
    })
}

/// K registered captures and the K patterns that produced them.
#[derive(Debug, Clone)]
pub struct TemporalStack {
    pub captures: Vec<Image>,
    pub references: Vec<Image>,
}

impl TemporalStack {
    pub fn new(captures: Vec<Image>, references: Vec<Image>) -> Result<Self> {
        if captures.len() < 2 || captures.len() != references.len() {
            return Err(NslError::Shape(format!(
                "temporal stack needs K >= 2 matched captures/references, got {}/{}",
                captures.len(),
                references.len()
            )));
        }
        let dims = captures[0].dims();
        if captures.iter().chain(&references).any(|i| i.dims() != dims) {
            return Err(NslError::Shape(
                "temporal stack rasters differ in shape".into(),
            ));
        }
        Ok(Self {
            captures,
            references,
        })
    }

    pub fn len(&self) -> usize {
        self.captures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captures.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.captures[0].dims()
    }
}

/// Highest local maximum of `scores` other than the one at `bd`.
fn second_peak(scores: &[f64], bd: usize) -> f64 {
    let at = |d: Option<usize>| {
        d.and_then(|d| scores.get(d))
            .copied()
            .filter(|s| s.is_finite())
    };
    (0..scores.len())
        .filter(|&d| d != bd && scores[d].is_finite())
        .filter(|&d| {
            let s = scores[d];
            at(d.checked_sub(1)).is_none_or(|p| s >= p) && at(Some(d + 1)).is_none_or(|n| s >= n)
        })
        .fold(f64::NEG_INFINITY, |m, d| m.max(scores[d]))
}

/// Centered, unit-norm K-vector; `None` when its variance is at most `min_var`.
fn normalize_code(v: &[f64], min_var: f64) -> Option<Vec<f64>> {
    let k = v.len() as f64;
    let m = v.iter().sum::<f64>() / k;
    let centered: Vec<f64> = v.iter().map(|x| x - m).collect();
    let ss: f64 = centered.iter().map(|c| c * c).sum();
    (ss > min_var.max(ZERO_VARIANCE) * k).then(|| {
        let inv = 1.0 / ss.sqrt();
        centered.into_iter().map(|c| c * inv).collect()
    })
}

fn normalized_codes(frames: &[Image], min_var: f64) -> Vec<Option<Vec<f64>>> {
    let (w, h) = frames[0].dims();
    (0..w * h)
        .map(|i| {
            let v: Vec<f64> = frames.iter().map(|f| f.as_slice()[i]).collect();
            normalize_code(&v, min_var)
        })
        .collect()
}

/// Temporal codes of one side of the match.
struct Codes<'a> {
    frames: &'a [Image],
    codes: Vec<Option<Vec<f64>>>,
}

impl<'a> Codes<'a> {
    fn new(frames: &'a [Image], min_var: f64) -> Self {
        Self {
            frames,
            codes: normalized_codes(frames, min_var),
        }
    }

    fn captured(frames: &'a [Image]) -> Self {
        Self::new(frames, TEMPORAL_MIN_STD * TEMPORAL_MIN_STD)
    }

    fn reference(frames: &'a [Image]) -> Self {
        Self::new(frames, 0.0)
    }
}

/// Per-pixel temporal matching of `base` codes against `other`; see [`scan`]
/// for `sign` and the border rule.
fn temporal_scan(base: &Codes<'_>, other: &Codes<'_>, max_disp: usize, sign: i64) -> DisparityMap {
    let (w, h) = base.frames[0].dims();
    let x_min = if sign > 0 { max_disp } else { 0 };
    let rows: Vec<Vec<(f64, bool)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut out = vec![(0.0, false); w];
            let mut scores = vec![f64::NAN; max_disp + 1];
            for x in x_min..w {
                let Some(a) = &base.codes[y * w + x] else {
                    continue;
                };
                scores.iter_mut().for_each(|s| *s = f64::NAN);
                let mut best: Option<usize> = None;
                for d in 0..=max_disp {
                    let xo = x as i64 - sign * d as i64;
                    if xo < 0 || xo >= w as i64 {
                        continue;
                    }
                    let Some(b) = &other.codes[y * w + xo as usize] else {
                        continue;
                    };
                    let s: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                    scores[d] = s;
                    if best.is_none_or(|bd| s > scores[bd]) {
                        best = Some(d);
                    }
                }
                let Some(bd) = best else { continue };
                let runner_up = second_peak(&scores, bd);
                if scores[bd] - runner_up < TEMPORAL_UNIQUENESS {
                    continue;
                }
                let disp = refine_zncc(a, bd, scores[bd], max_disp, |d| {
                    let xo = x as i64 - sign * d as i64;
                    (0..w as i64)
                        .contains(&xo)
                        .then(|| other.frames.iter().map(|f| f.at(xo as usize, y)).collect())
                });
                out[x] = (disp, true);
            }
            out
        })
        .collect();
    let mut values = Raster::filled(w, h, 0.0);
    let mut mask = ValidityMask::filled(w, h, false);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (d, ok)) in row.into_iter().enumerate() {
            values.set(x, y, d);
            mask.set(x, y, ok);
        }
    }
    DisparityMap { values, mask }
}

/// Per-pixel temporal ZNCC decoding across the K captures.
pub fn temporal_zncc_decode(stack: &TemporalStack, max_disp: usize) -> Result<DisparityMap> {
    let (w, _) = stack.dims();
    if max_disp >= w {
        return Err(NslError::Config(format!(
            "max_disp {max_disp} >= width {w}"
        )));
    }
    let captured = Codes::captured(&stack.captures);
    let reference = Codes::reference(&stack.references);
    Ok(temporal_scan(&captured, &reference, max_disp, 1))
}

/// Settings for multi-pattern pseudo ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoGtConfig {
    pub max_disp: usize,
    pub lrc_tol: f64,
    /// Depth jump (meters) between 4-neighbors above which pixels are dropped.
    pub grad_thresh: f64,
}

impl Default for PseudoGtConfig {
    fn default() -> Self {
        Self {
            max_disp: 40,
            lrc_tol: 1.0,
            grad_thresh: 0.05,
        }
    }
}

/// Temporal decoding followed by left-right consistency, then gradient-outlier removal.
pub fn pseudo_ground_truth(
    stack: &TemporalStack,
    focal: f64,
    baseline: f64,
    cfg: &PseudoGtConfig,
) -> Result<(DisparityMap, DepthMap)> {
    let (w, _) = stack.dims();
    if cfg.max_disp >= w {
        return Err(NslError::Config(format!(
            "max_disp {} >= width {w}",
            cfg.max_disp
        )));
    }
    let captured = Codes::captured(&stack.captures);
    let reference = Codes::reference(&stack.references);
    let d_left = temporal_scan(&captured, &reference, cfg.max_disp, 1);
    let d_ref = temporal_scan(&reference, &captured, cfg.max_disp, -1);
    let lrc = left_right_consistency(&d_left, &d_ref, cfg.lrc_tol)?;
    let disp = d_left.restrict(&lrc)?;
    let depth = disparity_to_depth(&disp, focal, baseline);
    let keep = remove_depth_outliers(&depth, cfg.grad_thresh);
    Ok((disp.restrict(&keep)?, depth.restrict(&keep)?))
}

/// Template-matching baseline as evaluated: block matching, triangulation,
/// then gradient-outlier removal on the resulting depth.
pub fn tm_baseline(
    left: &Image,
    reference: &Image,
    cfg: &BlockMatchConfig,
    focal: f64,
    baseline: f64,
    grad_thresh: f64,
) -> Result<(DisparityMap, DepthMap)> {
    let disp = block_match(left, reference, cfg)?;
    let depth = disparity_to_depth(&disp, focal, baseline);
    let keep = remove_depth_outliers(&depth, grad_thresh);
    Ok((disp.restrict(&keep)?, depth.restrict(&keep)?))
}
