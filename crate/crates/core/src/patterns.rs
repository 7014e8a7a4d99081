//! Generators for the eight projected-pattern families.
//!
//! Six kinds are used for training and two (`kinect_dots`, `random_square`)
//! are held out. The dot kinds are statistical stand-ins for the proprietary
//! D415/D435/Kinect projector layouts, not reproductions of them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NslError, Result};
use crate::raster::Image;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    DotsD415,
    DotsD435,
    KinectDots,
    RandomBinary,
    RandomSquare,
    Sincos,
    Alacarte,
    AlacarteRoll,
}

impl PatternKind {
    pub const ALL: [PatternKind; 8] = [
        PatternKind::DotsD415,
        PatternKind::DotsD435,
        PatternKind::KinectDots,
        PatternKind::RandomBinary,
        PatternKind::RandomSquare,
        PatternKind::Sincos,
        PatternKind::Alacarte,
        PatternKind::AlacarteRoll,
    ];

    pub const TRAIN: [PatternKind; 6] = [
        PatternKind::DotsD415,
        PatternKind::DotsD435,
        PatternKind::RandomBinary,
        PatternKind::Sincos,
        PatternKind::Alacarte,
        PatternKind::AlacarteRoll,
    ];

    pub const TEST: [PatternKind; 2] = [PatternKind::KinectDots, PatternKind::RandomSquare];

    pub fn name(self) -> &'static str {
        match self {
            PatternKind::DotsD415 => "dots_d415",
            PatternKind::DotsD435 => "dots_d435",
            PatternKind::KinectDots => "kinect_dots",
            PatternKind::RandomBinary => "random_binary",
            PatternKind::RandomSquare => "random_square",
            PatternKind::Sincos => "sincos",
            PatternKind::Alacarte => "alacarte",
            PatternKind::AlacarteRoll => "alacarte_roll",
        }
    }

    pub fn is_test_kind(self) -> bool {
        Self::TEST.contains(&self)
    }
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PatternKind {
    type Err = NslError;

    fn from_str(s: &str) -> Result<Self> {
        PatternKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| NslError::InvalidSpec(format!("unknown pattern kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub kind: PatternKind,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl PatternSpec {
    pub fn new(kind: PatternKind, width: usize, height: usize, seed: u64) -> Self {
        Self {
            kind,
            width,
            height,
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(NslError::InvalidSpec(format!(
                "pattern must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        let allowed: &[&str] = match self.kind {
            PatternKind::DotsD415 | PatternKind::DotsD435 | PatternKind::KinectDots => {
                &["density", "dot_size"]
            }
            PatternKind::RandomBinary | PatternKind::Alacarte | PatternKind::AlacarteRoll => &["p"],
            PatternKind::RandomSquare => &["side_min", "side_max", "coverage"],
            PatternKind::Sincos => &["period_x", "period_y"],
        };
        for (key, &value) in &self.params {
            if !allowed.contains(&key.as_str()) {
                return Err(NslError::InvalidSpec(format!(
                    "parameter `{key}` is not used by {}",
                    self.kind
                )));
            }
            if !value.is_finite() {
                return Err(NslError::InvalidSpec(format!(
                    "parameter `{key}` is not finite"
                )));
            }
        }
        let p = self.param("p", 0.5);
        if !(0.0..=1.0).contains(&p) {
            return Err(NslError::InvalidSpec(format!(
                "p must lie in [0,1], got {p}"
            )));
        }
        let density = self.param("density", 0.08);
        if !(density > 0.0 && density <= 1.0) {
            return Err(NslError::InvalidSpec(format!(
                "density must lie in (0,1], got {density}"
            )));
        }
        if self.param("period_x", 16.0) <= 0.0 || self.param("period_y", 16.0) <= 0.0 {
            return Err(NslError::InvalidSpec(
                "fringe periods must be positive".into(),
            ));
        }
        let (lo, hi) = (self.param("side_min", 3.0), self.param("side_max", 9.0));
        if lo < 1.0 || hi < lo {
            return Err(NslError::InvalidSpec(format!(
                "square sides [{lo},{hi}] invalid"
            )));
        }
        Ok(())
    }
}

/// A projected pattern: intensities in [0,1], row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternImage {
    pub intensities: Image,
}

impl PatternImage {
    pub fn width(&self) -> usize {
        self.intensities.width()
    }

    pub fn height(&self) -> usize {
        self.intensities.height()
    }
}

pub fn generate_pattern(spec: &PatternSpec) -> Result<PatternImage> {
    spec.validate()?;
    let intensities = match spec.kind {
        PatternKind::DotsD415 => dots(spec, 0.08, 2.0),
        PatternKind::DotsD435 => dots(spec, 0.10, 2.0),
        PatternKind::KinectDots => dots(spec, 0.06, 1.0),
        PatternKind::RandomBinary => random_binary(spec),
        PatternKind::RandomSquare => random_square(spec),
        PatternKind::Sincos => sincos(spec),
        PatternKind::Alacarte => alacarte(spec),
        PatternKind::AlacarteRoll => alacarte_roll(spec),
    };
    Ok(PatternImage { intensities })
}

fn random_binary(spec: &PatternSpec) -> Image {
    let p = spec.param("p", 0.5);
    let mut rng = rng::stream(spec.seed, "pattern.random_binary");
    Image::from_fn(spec.width, spec.height, |_, _| {
        if rng.random::<f64>() < p {
            1.0
        } else {
            0.0
        }
    })
}

fn column_code(spec: &PatternSpec) -> Vec<f64> {
    let p = spec.param("p", 0.5);
    let mut rng = rng::stream(spec.seed, "pattern.alacarte.columns");
    (0..spec.width)
        .map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
        .collect()
}

fn alacarte(spec: &PatternSpec) -> Image {
    let code = column_code(spec);
    Image::from_fn(spec.width, spec.height, |x, _| code[x])
}

/// Per-row cyclic shift applied to the alacarte code: row `y` of the result
/// at column `x` reads the code at `(x + shift[y]) mod width`.
pub fn alacarte_roll_shifts(seed: u64, width: usize, height: usize) -> Vec<usize> {
    let mut rng = rng::stream(seed, "pattern.alacarte_roll.shifts");
    (0..height).map(|_| rng.random_range(0..width)).collect()
}

fn alacarte_roll(spec: &PatternSpec) -> Image {
    let code = column_code(spec);
    let shifts = alacarte_roll_shifts(spec.seed, spec.width, spec.height);
    let w = spec.width;
    Image::from_fn(w, spec.height, |x, y| code[(x + shifts[y]) % w])
}

fn sincos(spec: &PatternSpec) -> Image {
    let tx = spec.param("period_x", 16.0);
    let ty = spec.param("period_y", 16.0);
    let two_pi = std::f64::consts::TAU;
    Image::from_fn(spec.width, spec.height, |x, y| {
        0.5 + 0.25 * (two_pi * x as f64 / tx).sin() + 0.25 * (two_pi * y as f64 / ty).cos()
    })
}

fn random_square(spec: &PatternSpec) -> Image {
    let side_min = spec.param("side_min", 3.0).round() as usize;
    let side_max = spec.param("side_max", 9.0).round() as usize;
    let target = spec.param("coverage", 0.3).clamp(0.0, 0.95);
    let (w, h) = (spec.width, spec.height);
    let mut img = Image::filled(w, h, 0.0);
    let mut lit = 0usize;
    let goal = (target * (w * h) as f64).ceil() as usize;
    let mut rng = rng::stream(spec.seed, "pattern.random_square");
    // bounded so pathological params cannot spin forever
    let mut attempts = 0usize;
    while lit < goal && attempts < 64 * w * h {
        attempts += 1;
        let side = rng.random_range(side_min..=side_max).min(w).min(h);
        let x0 = rng.random_range(0..=w - side);
        let y0 = rng.random_range(0..=h - side);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                let px = img.get_mut(x, y);
                if *px == 0.0 {
                    *px = 1.0;
                    lit += 1;
                }
            }
        }
    }
    img
}

/// Jittered-grid dots: one `dot_size`-square dot per cell, cell area chosen so
/// the lit fraction matches `density`. Dot brightness varies per dot in [0.7, 1].
fn dots(spec: &PatternSpec, default_density: f64, default_dot: f64) -> Image {
    let density = spec.param("density", default_density);
    let dot = spec.param("dot_size", default_dot).round().max(1.0) as usize;
    let area = (dot * dot) as f64 / density;
    let cell_w = (area.sqrt().round() as usize).max(dot);
    let cell_h = ((area / cell_w as f64).round() as usize).max(dot);
    let (w, h) = (spec.width, spec.height);
    let mut img = Image::filled(w, h, 0.0);
    let mut rng = rng::stream(spec.seed, "pattern.dots");
    let mut cy = 0;
    while cy < h {
        let mut cx = 0;
        while cx < w {
            let ox = rng.random_range(0..=cell_w - dot);
            let oy = rng.random_range(0..=cell_h - dot);
            let level = rng.random_range(0.7..=1.0);
            for y in cy + oy..(cy + oy + dot).min(h) {
                for x in cx + ox..(cx + ox + dot).min(w) {
                    img.set(x, y, level);
                }
            }
            cx += cell_w;
        }
        cy += cell_h;
    }
    img
}
