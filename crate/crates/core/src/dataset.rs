//! On-disk dataset format and seeded dataset generation.
//!
//! ```text
//! <root>/manifest.json
//! <root>/samples/<id>/{ir_left.png, ir_right.png, pattern.png,
//!                      depth.pfm, disp_lp.pfm, disp_lr.pfm,
//!                      mask_depth.png, mask_lp.png, mask_lr.png, meta.json}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, write_atomic};
use crate::classical::TemporalStack;
use crate::error::{NslError, Result};
use crate::geometry::{DepthMap, DisparityMap, Intrinsics, RigCalibration};
use crate::patterns::{generate_pattern, PatternImage, PatternKind, PatternSpec};
use crate::raster::{Image, Raster, ValidityMask};
use crate::rng;
use crate::simulator::{
    random_scene, render_ground_truth, render_ir, render_sample, Difficulty, RenderConfig, Sample,
    View,
};

pub const MANIFEST_VERSION: u32 = 1;

const IR_LEFT: &str = "ir_left.png";
const IR_RIGHT: &str = "ir_right.png";
const PATTERN: &str = "pattern.png";
const DEPTH: &str = "depth.pfm";
const DISP_LP: &str = "disp_lp.pfm";
const DISP_LR: &str = "disp_lr.pfm";
const MASK_DEPTH: &str = "mask_depth.png";
const MASK_LP: &str = "mask_lp.png";
const MASK_LR: &str = "mask_lr.png";
const META: &str = "meta.json";

// ---------------------------------------------------------------- PFM

/// Little-endian single-channel PFM (negative scale), rows stored bottom-up.
pub fn encode_pfm(r: &Raster<f64>) -> Vec<u8> {
    let (w, h) = r.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for y in (0..h).rev() {
        for &v in r.row(y) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], origin: &Path) -> Result<Raster<f64>> {
    let bad = |why: &str| NslError::corrupt(origin, format!("pfm: {why}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    // magic, width, height, scale: whitespace separated, one byte after scale
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos >= bytes.len() {
            return Err(bad("truncated header"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?);
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(bad("only single-channel `Pf` files are supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    let data = &bytes[pos.min(bytes.len())..];
    if data.len() != 4 * w * h {
        return Err(bad(&format!(
            "expected {} data bytes, found {}",
            4 * w * h,
            data.len()
        )));
    }
    let read = |c: &[u8]| -> f64 {
        let b: [u8; 4] = c.try_into().unwrap();
        if scale < 0.0 {
            f32::from_le_bytes(b) as f64
        } else {
            f32::from_be_bytes(b) as f64
        }
    };
    let mut values = vec![0.0; w * h];
    for (i, c) in data.chunks_exact(4).enumerate() {
        let (x, yb) = (i % w, i / w);
        values[(h - 1 - yb) * w + x] = read(c);
    }
    Raster::from_vec(w, h, values)
}

pub fn write_pfm(path: &Path, r: &Raster<f64>) -> Result<()> {
    write_atomic(path, &encode_pfm(r))
}

pub fn read_pfm(path: &Path) -> Result<Raster<f64>> {
    let bytes = fs::read(path).map_err(|e| NslError::io(path, e))?;
    decode_pfm(&bytes, path)
}

// ---------------------------------------------------------------- PNG

fn png_bytes(img: DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// 16-bit grayscale PNG of intensities in [0,1] (`round(v·65535)`).
pub fn encode_png16(img: &Image) -> Result<Vec<u8>> {
    let (w, h) = img.dims();
    let data: Vec<u16> = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, data)
        .expect("sized buffer");
    png_bytes(DynamicImage::ImageLuma16(buf))
}

/// 8-bit grayscale PNG of intensities in [0,1] (`round(v·255)`).
pub fn encode_png8(img: &Image) -> Result<Vec<u8>> {
    let (w, h) = img.dims();
    let data: Vec<u8> = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf =
        ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(w as u32, h as u32, data).expect("sized buffer");
    png_bytes(DynamicImage::ImageLuma8(buf))
}

/// 8-bit PNG with 255 for valid and 0 for invalid pixels.
pub fn encode_mask_png(mask: &ValidityMask) -> Result<Vec<u8>> {
    let (w, h) = mask.dims();
    let data: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf =
        ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(w as u32, h as u32, data).expect("sized buffer");
    png_bytes(DynamicImage::ImageLuma8(buf))
}

/// Grayscale PNG (8 or 16 bit) as intensities in [0,1].
pub fn decode_png_gray(bytes: &[u8], origin: &Path) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| NslError::corrupt(origin, format!("png: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f64> = match &img {
        DynamicImage::ImageLuma8(b) => b.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.as_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        _ => {
            return Err(NslError::corrupt(
                origin,
                "png is not single-channel grayscale",
            ))
        }
    };
    Raster::from_vec(w, h, values)
}

pub fn decode_mask_png(bytes: &[u8], origin: &Path) -> Result<ValidityMask> {
    let img = decode_png_gray(bytes, origin)?;
    if img.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(NslError::corrupt(origin, "mask values must be 0 or 255"));
    }
    Ok(img.map(|&v| v == 1.0))
}

pub fn read_png_gray(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| NslError::io(path, e))?;
    decode_png_gray(&bytes, path)
}

// ---------------------------------------------------------------- samples

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    /// Rendered with the held-out pattern kinds.
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = NslError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| NslError::Config(format!("unknown split {s:?}")))
    }
}

/// Per-sample metadata stored as `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pattern_id: String,
    pub seed: u64,
    pub rig: RigCalibration,
    pub difficulty: Option<Difficulty>,
    pub split: Option<Split>,
    pub noise_sigma: Option<f64>,
    /// SHA-256 of every payload file, by file name.
    pub checksums: BTreeMap<String, String>,
}

fn encode_sample(sample: &Sample) -> Result<Vec<(&'static str, Vec<u8>)>> {
    Ok(vec![
        (IR_LEFT, encode_png16(&sample.ir_left)?),
        (IR_RIGHT, encode_png16(&sample.ir_right)?),
        (PATTERN, encode_png16(&sample.pattern_ref.intensities)?),
        (DEPTH, encode_pfm(&sample.depth_gt.values)),
        (DISP_LP, encode_pfm(&sample.disp_gt_lp.values)),
        (DISP_LR, encode_pfm(&sample.disp_gt_lr.values)),
        (MASK_DEPTH, encode_mask_png(&sample.depth_gt.mask)?),
        (MASK_LP, encode_mask_png(&sample.disp_gt_lp.mask)?),
        (MASK_LR, encode_mask_png(&sample.disp_gt_lr.mask)?),
    ])
}

/// Write `sample` into directory `dir`. The directory is assembled under a
/// temporary name and renamed into place.
pub fn write_sample(dir: &Path, sample: &Sample, meta: &SampleMeta) -> Result<SampleMeta> {
    let files = encode_sample(sample)?;
    let mut meta = meta.clone();
    meta.width = sample.width();
    meta.height = sample.height();
    meta.pattern_id = sample.pattern_id.clone();
    meta.seed = sample.seed;
    meta.rig = sample.rig;
    meta.checksums = files
        .iter()
        .map(|(n, b)| (n.to_string(), sha256_hex(b)))
        .collect();
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| NslError::io(parent, e))?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("sample");
    let tmp = parent.join(format!(".{name}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| NslError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| NslError::io(&tmp, e))?;
    for (n, b) in &files {
        let p = tmp.join(n);
        fs::write(&p, b).map_err(|e| NslError::io(&p, e))?;
    }
    let p = tmp.join(META);
    fs::write(&p, serde_json::to_vec_pretty(&meta)?).map_err(|e| NslError::io(&p, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| NslError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| NslError::io(dir, e))?;
    Ok(meta)
}

/// Read and verify a sample directory.
pub fn read_sample(dir: &Path) -> Result<Sample> {
    Ok(read_sample_with_meta(dir)?.0)
}

pub fn read_sample_with_meta(dir: &Path) -> Result<(Sample, SampleMeta)> {
    let meta_path = dir.join(META);
    let meta_bytes = fs::read(&meta_path).map_err(|e| NslError::io(&meta_path, e))?;
    let meta: SampleMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| NslError::corrupt(&meta_path, e.to_string()))?;
    let load = |name: &str| -> Result<Vec<u8>> {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| NslError::io(&p, e))?;
        match meta.checksums.get(name) {
            Some(sum) if *sum == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(NslError::corrupt(&p, "checksum mismatch")),
            None => Err(NslError::corrupt(&p, "no checksum recorded")),
        }
    };
    let (w, h) = (meta.width, meta.height);
    let sized = |r: Image, name: &str| -> Result<Image> {
        if r.dims() != (w, h) {
            return Err(NslError::corrupt(
                dir.join(name),
                format!("size {:?}, expected {:?}", r.dims(), (w, h)),
            ));
        }
        Ok(r)
    };
    let gray = |name: &str| -> Result<Image> {
        sized(decode_png_gray(&load(name)?, &dir.join(name))?, name)
    };
    let pfm = |name: &str| -> Result<Raster<f64>> {
        sized(decode_pfm(&load(name)?, &dir.join(name))?, name)
    };
    let mask = |name: &str| -> Result<ValidityMask> {
        let m = decode_mask_png(&load(name)?, &dir.join(name))?;
        if m.dims() != (w, h) {
            return Err(NslError::corrupt(dir.join(name), "mask size mismatch"));
        }
        Ok(m)
    };
    let depth_gt = DepthMap::new(pfm(DEPTH)?, mask(MASK_DEPTH)?)?;
    let disp_gt_lp = DisparityMap::new(pfm(DISP_LP)?, mask(MASK_LP)?)?;
    let disp_gt_lr = DisparityMap::new(pfm(DISP_LR)?, mask(MASK_LR)?)?;
    let sample = Sample {
        ir_left: gray(IR_LEFT)?,
        ir_right: gray(IR_RIGHT)?,
        pattern_ref: PatternImage {
            intensities: gray(PATTERN)?,
        },
        depth_gt,
        disp_gt_lp,
        disp_gt_lr,
        rig: meta.rig,
        pattern_id: meta.pattern_id.clone(),
        seed: meta.seed,
    };
    Ok((sample, meta))
}

// ---------------------------------------------------------------- generation

/// Randomization ranges for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Focal length as a fraction of image width.
    pub focal_fraction: [f64; 2],
    pub baseline_lp: [f64; 2],
    pub baseline_lr: [f64; 2],
    pub noise_sigma: [f64; 2],
    pub gamma: f64,
    pub difficulties: Vec<Difficulty>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            width: 160,
            height: 96,
            n_val: 64,
            n_test: 64,
            focal_fraction: [0.69, 0.81],
            baseline_lp: [0.06, 0.10],
            baseline_lr: [0.10, 0.14],
            noise_sigma: [0.005, 0.02],
            gamma: 1.0,
            difficulties: Difficulty::ALL.to_vec(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, r: [f64; 2], lo: f64| -> Result<()> {
            if !(r[0] >= lo && r[0] <= r[1] && r[1].is_finite()) {
                return Err(NslError::Config(format!("{name} range {r:?} is invalid")));
            }
            Ok(())
        };
        if self.width < 16 || self.height < 16 {
            return Err(NslError::Config("images must be at least 16x16".into()));
        }
        range("focal_fraction", self.focal_fraction, 1e-3)?;
        range("baseline_lp", self.baseline_lp, 1e-6)?;
        range("baseline_lr", self.baseline_lr, 1e-6)?;
        range("noise_sigma", self.noise_sigma, 0.0)?;
        if self.gamma <= 0.0 {
            return Err(NslError::Config("gamma must be positive".into()));
        }
        if self.difficulties.is_empty() {
            return Err(NslError::Config(
                "at least one difficulty is required".into(),
            ));
        }
        Ok(())
    }
}

/// Pattern-kind split declaration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSplit {
    pub train: Vec<PatternKind>,
    pub test: Vec<PatternKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    /// Directory relative to the dataset root.
    pub path: String,
    pub files: Vec<String>,
    pub pattern_id: String,
    pub seed: u64,
    pub rig: RigCalibration,
    pub difficulty: Difficulty,
    pub noise_sigma: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
    pub patterns: PatternSplit,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let p = root.join("manifest.json");
        let bytes = fs::read(&p).map_err(|e| NslError::io(&p, e))?;
        let m: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| NslError::corrupt(&p, e.to_string()))?;
        m.validate(root)?;
        Ok(m)
    }

    /// Ids unique, pattern splits disjoint, every referenced file present.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let p = root.join("manifest.json");
        if self.version != MANIFEST_VERSION {
            return Err(NslError::corrupt(
                &p,
                format!("unsupported manifest version {}", self.version),
            ));
        }
        if self
            .patterns
            .train
            .iter()
            .any(|k| self.patterns.test.contains(k))
        {
            return Err(NslError::corrupt(
                &p,
                "train and test pattern kinds overlap",
            ));
        }
        let mut ids = std::collections::BTreeSet::new();
        for r in &self.samples {
            if !ids.insert(&r.id) {
                return Err(NslError::corrupt(
                    &p,
                    format!("duplicate sample id {}", r.id),
                ));
            }
            for f in &r.files {
                let fp = root.join(&r.path).join(f);
                if !fp.is_file() {
                    return Err(NslError::corrupt(&fp, "referenced file is missing"));
                }
            }
        }
        Ok(())
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |r| r.split == split)
    }
}

/// Opened dataset: manifest plus root directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self {
            root: root.to_path_buf(),
            manifest: DatasetManifest::load(root)?,
        })
    }

    pub fn read(&self, record: &SampleRecord) -> Result<Sample> {
        read_sample(&self.root.join(&record.path))
    }

    /// All samples of `split` in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        let records: Vec<&SampleRecord> = self.manifest.records(split).collect();
        records.par_iter().map(|r| self.read(r)).collect()
    }

    pub fn records(&self, split: Split) -> Vec<&SampleRecord> {
        self.manifest.records(split).collect()
    }
}

struct Plan {
    id: String,
    split: Split,
    kind: PatternKind,
    seed: u64,
}

/// Balanced assignment of `kinds` to `n` slots in seeded random order.
fn balanced_kinds(n: usize, kinds: &[PatternKind], seed: u64, label: &str) -> Vec<PatternKind> {
    let mut out: Vec<PatternKind> = (0..n).map(|i| kinds[i % kinds.len()]).collect();
    out.shuffle(&mut rng::stream(seed, label));
    out
}

struct Setup {
    rig: RigCalibration,
    noise: f64,
    difficulty: Difficulty,
}

fn sample_setup(seed: u64, cfg: &DatasetConfig) -> Setup {
    let mut r = rng::stream(seed, "dataset.sample");
    let focal = cfg.width as f64 * r.random_range(cfg.focal_fraction[0]..=cfg.focal_fraction[1]);
    let b_lp = r.random_range(cfg.baseline_lp[0]..=cfg.baseline_lp[1]);
    let b_lr = r.random_range(cfg.baseline_lr[0]..=cfg.baseline_lr[1]);
    let noise = r.random_range(cfg.noise_sigma[0]..=cfg.noise_sigma[1]);
    let difficulty = cfg.difficulties[r.random_range(0..cfg.difficulties.len())];
    let intr = Intrinsics::centered(focal, cfg.width, cfg.height);
    Setup {
        rig: RigCalibration::symmetric(intr, b_lp, b_lr),
        noise,
        difficulty,
    }
}

/// Render one sample from its own seed.
pub fn render_random_sample(
    seed: u64,
    kind: PatternKind,
    cfg: &DatasetConfig,
) -> Result<(Sample, Difficulty, f64)> {
    let Setup {
        rig,
        noise,
        difficulty,
    } = sample_setup(seed, cfg);
    let pattern = generate_pattern(&PatternSpec::new(
        kind,
        cfg.width,
        cfg.height,
        rng::derive_seed(seed, "pattern", 0),
    ))?;
    // a handful of retries covers layouts that leave the view empty
    for attempt in 0..SCENE_ATTEMPTS {
        let scene = random_scene(rng::derive_seed(seed, "scene", attempt), difficulty);
        let mut rc = RenderConfig::new(
            rig,
            pattern.clone(),
            rng::derive_seed(seed, "render", attempt),
        );
        rc.pattern_id = kind.name().to_string();
        rc.noise_sigma = noise;
        rc.gamma = cfg.gamma;
        match render_sample(&scene, &rc) {
            Ok(s) => return Ok((s, difficulty, noise)),
            Err(NslError::EmptyScene) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(NslError::EmptyScene)
}

const SCENE_ATTEMPTS: u64 = 8;

/// Left captures of the scene behind sample `seed` under `k` alacarte
/// patterns, as input to multi-pattern pseudo ground truth.
pub fn render_temporal_stack(seed: u64, cfg: &DatasetConfig, k: usize) -> Result<TemporalStack> {
    let Setup {
        rig,
        noise,
        difficulty,
    } = sample_setup(seed, cfg);
    let scene = (0..SCENE_ATTEMPTS)
        .map(|a| random_scene(rng::derive_seed(seed, "scene", a), difficulty))
        .find(|s| render_ground_truth(s, &rig, View::Left).valid_count() > 0)
        .ok_or(NslError::EmptyScene)?;
    let mut captures = Vec::with_capacity(k);
    let mut references = Vec::with_capacity(k);
    for i in 0..k as u64 {
        let spec = PatternSpec::new(
            PatternKind::Alacarte,
            cfg.width,
            cfg.height,
            rng::derive_seed(seed, "pseudo_gt.pattern", i),
        );
        let pattern = generate_pattern(&spec)?;
        let mut rc = RenderConfig::new(
            rig,
            pattern.clone(),
            rng::derive_seed(seed, "pseudo_gt.render", i),
        );
        rc.noise_sigma = noise;
        rc.gamma = cfg.gamma;
        rc.validate()?;
        captures.push(render_ir(&scene, &rc, View::Left));
        references.push(pattern.intensities);
    }
    TemporalStack::new(captures, references)
}

/// Generate `n` training samples plus the configured validation and
/// held-out-pattern shards under `root`, then write the manifest.
pub fn generate_dataset(
    root: &Path,
    n: usize,
    seed: u64,
    cfg: &DatasetConfig,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(NslError::Config(
            "dataset needs at least one training sample".into(),
        ));
    }
    cfg.validate()?;
    let mut plans = Vec::with_capacity(n + cfg.n_val + cfg.n_test);
    let shards = [
        (Split::Train, n, &PatternKind::TRAIN[..]),
        (Split::Val, cfg.n_val, &PatternKind::TRAIN[..]),
        (Split::Test, cfg.n_test, &PatternKind::TEST[..]),
    ];
    for (split, count, kinds) in shards {
        let label = format!("dataset.kinds.{}", split.name());
        for (i, kind) in balanced_kinds(count, kinds, seed, &label)
            .into_iter()
            .enumerate()
        {
            plans.push(Plan {
                id: format!("{}_{i:05}", split.name()),
                split,
                kind,
                seed: rng::derive_seed(seed, &format!("dataset.{}", split.name()), i as u64),
            });
        }
    }
    let samples_dir = root.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| NslError::io(&samples_dir, e))?;
    let records: Vec<SampleRecord> = plans
        .par_iter()
        .map(|p| -> Result<SampleRecord> {
            let (sample, difficulty, noise) = render_random_sample(p.seed, p.kind, cfg)?;
            let meta = SampleMeta {
                id: p.id.clone(),
                width: 0,
                height: 0,
                pattern_id: String::new(),
                seed: 0,
                rig: sample.rig,
                difficulty: Some(difficulty),
                split: Some(p.split),
                noise_sigma: Some(noise),
                checksums: BTreeMap::new(),
            };
            let meta = write_sample(&samples_dir.join(&p.id), &sample, &meta)?;
            let mut files: Vec<String> = meta.checksums.keys().cloned().collect();
            files.push(META.to_string());
            Ok(SampleRecord {
                id: p.id.clone(),
                path: format!("samples/{}", p.id),
                files,
                pattern_id: sample.pattern_id,
                seed: p.seed,
                rig: sample.rig,
                difficulty,
                noise_sigma: noise,
                split: p.split,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        config: cfg.clone(),
        patterns: PatternSplit {
            train: PatternKind::TRAIN.to_vec(),
            test: PatternKind::TEST.to_vec(),
        },
        samples: records,
    };
    write_atomic(
        &root.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
