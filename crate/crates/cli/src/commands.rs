use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nsl_core::checkpoint::{sha256_hex, write_atomic, Checkpoint};
use nsl_core::classical::{pseudo_ground_truth, tm_baseline};
use nsl_core::dataset::{encode_png8, generate_dataset, render_temporal_stack, Dataset, Split};
use nsl_core::geometry::{depth_to_disparity, Pairing};
use nsl_core::matcher::{LossRecord, MatcherMode, MatcherParams, TrainOutcome};
use nsl_core::metrics::{
    aggregate, compute_metrics, format_table, MetricReport, Weighting, DEFAULT_THRESHOLDS,
};
use nsl_core::refine::{initial_depths, train_stage2_with, RefinerParams};
use nsl_core::rng::derive_seed;
use nsl_core::simulator::Sample;
use nsl_core::{
    generate_pattern, DepthMap, DisparityMap, NslError, PatternKind, PatternSpec, Result,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::io::{
    copy_tree, load_inputs, read_index, read_prediction, write_index, write_prediction,
    PredictionIndex,
};

pub const CACHE_ENV: &str = "NSL_LAB_CACHE";

fn cache_root() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

fn cache_key(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())[..16].to_string()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| NslError::io(path, e))
}

pub fn gen_pattern(
    cfg: &RunConfig,
    kind: PatternKind,
    size: Option<[usize; 2]>,
    params: &[String],
    out: &Path,
) -> Result<()> {
    let [w, h] = size.unwrap_or([cfg.dataset.width, cfg.dataset.height]);
    let mut spec = PatternSpec::new(kind, w, h, cfg.seed);
    for kv in params {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            NslError::Config(format!("pattern parameter `{kv}` is not key=value"))
        })?;
        let v: f64 = v
            .parse()
            .map_err(|_| NslError::Config(format!("pattern parameter `{k}` is not a number")))?;
        spec = spec.with_param(k, v);
    }
    let pattern = generate_pattern(&spec)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_atomic(out, &encode_png8(&pattern.intensities)?)?;
    write_atomic(
        &out.with_extension("json"),
        &serde_json::to_vec_pretty(&spec)?,
    )?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, n: usize, out: &Path) -> Result<()> {
    let key = cache_key(&json!({"dataset": cfg.dataset, "n": n, "seed": cfg.seed}));
    let cached = cache_root().map(|c| c.join(format!("data-{key}")));
    if let Some(c) = cached
        .as_ref()
        .filter(|c| c.join("manifest.json").is_file())
    {
        eprintln!("dataset found in cache {}", c.display());
        return copy_tree(c, out);
    }
    let m = generate_dataset(out, n, cfg.seed, &cfg.dataset)?;
    eprintln!("wrote {} samples to {}", m.samples.len(), out.display());
    if let Some(c) = cached {
        copy_tree(out, &c)?;
    }
    Ok(())
}

fn manifest_hash(data: &Path) -> Result<String> {
    let path = data.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| NslError::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

fn write_losses(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in history {
        w.serialize(r)
            .map_err(|e| NslError::Config(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| NslError::Config(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn log_step(stage: &str, total: usize) -> impl FnMut(&LossRecord) + '_ {
    move |r: &LossRecord| {
        if r.step % 50 == 0 || r.step + 1 == total {
            eprintln!(
                "{stage} step {:>5}/{total} loss {:.4} lr {:.2e} grad {:.3}",
                r.step, r.loss, r.lr, r.grad_norm
            );
        }
    }
}

/// Checkpoint plus loss curve, either restored from the cache or produced by
/// `train` and then cached.
fn cached_training<P>(
    key: String,
    ckpt: &Path,
    csv: &Path,
    train: impl FnOnce() -> Result<TrainOutcome<P>>,
    to_ckpt: impl Fn(&P, u64) -> Result<Checkpoint>,
) -> Result<()> {
    let cached = cache_root().map(|c| {
        (
            c.join(format!("{key}.ckpt")),
            c.join(format!("{key}_loss.csv")),
        )
    });
    if let Some((c, l)) = cached.as_ref().filter(|(c, l)| c.is_file() && l.is_file()) {
        eprintln!("checkpoint found in cache {}", c.display());
        Checkpoint::load(c)?.save(ckpt)?;
        fs::copy(l, csv).map_err(|e| NslError::io(l, e))?;
        return Ok(());
    }
    let out = train()?;
    let steps = out.history.last().map(|r| r.step as u64 + 1).unwrap_or(0);
    to_ckpt(&out.params, steps)?.save(ckpt)?;
    write_losses(csv, &out.history)?;
    if let Some(reason) = out.aborted {
        return Err(NslError::NonFinite(format!(
            "training aborted ({reason}); last finite weights saved"
        )));
    }
    if let Some((c, l)) = cached {
        create_dir(c.parent().expect("cache file has a parent"))?;
        fs::copy(ckpt, &c).map_err(|e| NslError::io(&c, e))?;
        fs::copy(csv, &l).map_err(|e| NslError::io(&l, e))?;
    }
    Ok(())
}

pub fn stage1_path(runs: &Path, mode: MatcherMode) -> PathBuf {
    runs.join(format!("stage1_{mode}.ckpt"))
}

pub fn stage2_path(runs: &Path, mode: MatcherMode) -> PathBuf {
    runs.join(format!("stage2_{mode}.ckpt"))
}

pub fn train_stage1(cfg: &RunConfig, data: &Path, runs: &Path) -> Result<()> {
    let mc = cfg.matcher.clone();
    let mut tc = cfg.stage1.clone();
    tc.seed = derive_seed(cfg.seed, "stage1.train", 0);
    let init_seed = derive_seed(cfg.seed, "stage1.init", 0);
    create_dir(runs)?;
    let key = cache_key(
        &json!({"matcher": mc, "train": tc, "init": init_seed, "data": manifest_hash(data)?}),
    );
    let mode = mc.mode;
    cached_training(
        format!("stage1-{key}"),
        &stage1_path(runs, mode),
        &runs.join(format!("stage1_{mode}_loss.csv")),
        || {
            let samples = Dataset::open(data)?.load_split(Split::Train)?;
            let init = MatcherParams::init(mc, init_seed)?;
            nsl_core::matcher::train_stage1(&samples, init, &tc, log_step("stage1", tc.steps))
        },
        |p: &MatcherParams, step| p.to_checkpoint(step, init_seed),
    )
}

fn load_matcher(path: &Path, mode: MatcherMode) -> Result<MatcherParams> {
    let m = MatcherParams::from_checkpoint(&Checkpoint::load(path)?)?;
    if m.config.mode != mode {
        return Err(NslError::Config(format!(
            "{} holds a {} matcher, {} requested",
            path.display(),
            m.config.mode,
            mode
        )));
    }
    Ok(m)
}

pub fn train_stage2(
    cfg: &RunConfig,
    data: &Path,
    runs: &Path,
    stage1: Option<&Path>,
) -> Result<()> {
    let mode = cfg.matcher.mode;
    let s1_path = stage1
        .map(Path::to_path_buf)
        .unwrap_or_else(|| stage1_path(runs, mode));
    let s1 = load_matcher(&s1_path, mode)?;
    let mut tc = cfg.stage2.clone();
    tc.seed = derive_seed(cfg.seed, "stage2.train", 0);
    let init_seed = derive_seed(cfg.seed, "stage2.init", 0);
    create_dir(runs)?;
    let s1_hash = Checkpoint::load(&s1_path)?.hash()?;
    let key = cache_key(
        &json!({"refiner": cfg.refiner, "train": tc, "init": init_seed,
        "data": manifest_hash(data)?, "stage1": s1_hash}),
    );
    cached_training(
        format!("stage2-{key}"),
        &stage2_path(runs, mode),
        &runs.join(format!("stage2_{mode}_loss.csv")),
        || {
            let samples = Dataset::open(data)?.load_split(Split::Train)?;
            eprintln!("computing stage-1 estimates for {} samples", samples.len());
            let d_init = initial_depths(&s1, &samples)?;
            let init = RefinerParams::init(cfg.refiner.clone(), init_seed)?;
            train_stage2_with(&samples, &d_init, init, &tc, log_step("stage2", tc.steps))
        },
        |p: &RefinerParams, step| p.to_checkpoint(step, init_seed),
    )
}

/// Stage-1 (and optionally stage-2) depth and disparity of one sample.
pub fn predict(
    s1: &MatcherParams,
    s2: Option<&RefinerParams>,
    sample: &Sample,
) -> Result<(DepthMap, DisparityMap)> {
    let p = s1.predict(sample, None)?;
    match s2 {
        None => Ok((p.depth.clone(), p.disparity().clone())),
        Some(r) => {
            let z = r.refine(&sample.ir_left, &p.depth)?;
            let d = depth_to_disparity(
                &z,
                sample.rig.focal(),
                sample.rig.baseline(s1.config.mode.pairing()),
            );
            Ok((z, d))
        }
    }
}

pub struct InferArgs<'a> {
    pub input: &'a Path,
    pub split: Split,
    pub runs: &'a Path,
    pub stage1: Option<&'a Path>,
    pub stage2: Option<&'a Path>,
    pub stage: u8,
    pub mode: MatcherMode,
    pub out: &'a Path,
}

pub fn infer(a: &InferArgs<'_>) -> Result<()> {
    let s1_path = a
        .stage1
        .map(Path::to_path_buf)
        .unwrap_or_else(|| stage1_path(a.runs, a.mode));
    let s1 = load_matcher(&s1_path, a.mode)?;
    let s2 = match a.stage {
        1 => None,
        2 => {
            let path = a
                .stage2
                .map(Path::to_path_buf)
                .unwrap_or_else(|| stage2_path(a.runs, a.mode));
            Some(RefinerParams::from_checkpoint(&Checkpoint::load(&path)?)?)
        }
        s => return Err(NslError::Config(format!("stage must be 1 or 2, got {s}"))),
    };
    let inputs = load_inputs(a.input, a.split)?;
    inputs.par_iter().try_for_each(|i| -> Result<()> {
        let (z, d) = predict(&s1, s2.as_ref(), &i.sample)?;
        write_prediction(&a.out.join(&i.id), &z, Some(&d))
    })?;
    write_index(
        a.out,
        &PredictionIndex {
            method: format!("stage{}-{}", a.stage, a.mode),
            pairing: a.mode.pairing(),
            ids: inputs.iter().map(|i| i.id.clone()).collect(),
        },
    )?;
    eprintln!("wrote {} predictions to {}", inputs.len(), a.out.display());
    Ok(())
}

pub fn tm_prediction(cfg: &RunConfig, sample: &Sample) -> Result<(DepthMap, DisparityMap)> {
    let (d, z) = tm_baseline(
        &sample.ir_left,
        &sample.pattern_ref.intensities,
        &cfg.block_match,
        sample.rig.focal(),
        sample.rig.baseline_lp,
        cfg.tm.grad_thresh,
    )?;
    Ok((z, d))
}

pub fn baseline_tm(cfg: &RunConfig, input: &Path, split: Split, out: &Path) -> Result<()> {
    let inputs = load_inputs(input, split)?;
    inputs.par_iter().try_for_each(|i| -> Result<()> {
        let (z, d) = tm_prediction(cfg, &i.sample)?;
        write_prediction(&out.join(&i.id), &z, Some(&d))
    })?;
    write_index(
        out,
        &PredictionIndex {
            method: "tm".into(),
            pairing: Pairing::CameraProjector,
            ids: inputs.iter().map(|i| i.id.clone()).collect(),
        },
    )
}

pub fn pseudo_gt(cfg: &RunConfig, data: &Path, split: Split, out: &Path) -> Result<()> {
    let ds = Dataset::open(data)?;
    let records = ds.records(split);
    let k = cfg.pseudo_gt.patterns;
    let decode = cfg.pseudo_gt.decode();
    records.par_iter().try_for_each(|r| -> Result<()> {
        let stack = render_temporal_stack(r.seed, &ds.manifest.config, k)?;
        let (d, z) = pseudo_ground_truth(&stack, r.rig.focal(), r.rig.baseline_lp, &decode)?;
        write_prediction(&out.join(&r.id), &z, Some(&d))
    })?;
    write_index(
        out,
        &PredictionIndex {
            method: format!("pseudo-gt-{k}"),
            pairing: Pairing::CameraProjector,
            ids: records.iter().map(|r| r.id.clone()).collect(),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub per_image_mean: MetricReport,
    pub pixel_pooled: MetricReport,
    /// Samples without any pixel valid in both prediction and ground truth.
    pub skipped: Vec<String>,
    pub per_sample: BTreeMap<String, MetricReport>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        format_table(&[
            (
                format!("{} (per-image)", self.method),
                self.per_image_mean.clone(),
            ),
            (
                format!("{} (pooled)", self.method),
                self.pixel_pooled.clone(),
            ),
        ])
    }
}

enum GroundTruth {
    Dataset(Dataset),
    Predictions(PathBuf),
}

impl GroundTruth {
    fn open(path: &Path) -> Result<Self> {
        if path.join("manifest.json").is_file() {
            Ok(Self::Dataset(Dataset::open(path)?))
        } else if path.join(crate::io::PREDICTION_INDEX).is_file() {
            Ok(Self::Predictions(path.to_path_buf()))
        } else {
            Err(NslError::Config(format!(
                "{} is neither a dataset root nor a prediction directory",
                path.display()
            )))
        }
    }

    fn get(&self, id: &str, pairing: Pairing) -> Result<(DepthMap, Option<DisparityMap>)> {
        match self {
            Self::Dataset(ds) => {
                let r = ds
                    .manifest
                    .samples
                    .iter()
                    .find(|r| r.id == id)
                    .ok_or_else(|| {
                        NslError::Config(format!("sample {id} is not in the dataset"))
                    })?;
                let s = ds.read(r)?;
                let d = match pairing {
                    Pairing::CameraProjector => s.disp_gt_lp,
                    Pairing::CameraCamera => s.disp_gt_lr,
                };
                Ok((s.depth_gt, Some(d)))
            }
            Self::Predictions(dir) => {
                let p = read_prediction(&dir.join(id))?;
                Ok((p.depth, p.disparity))
            }
        }
    }
}

pub fn eval(pred: &Path, gt: &Path) -> Result<EvalReport> {
    let index = read_index(pred)?;
    let truth = GroundTruth::open(gt)?;
    let mut per_sample = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut reports = Vec::new();
    for id in &index.ids {
        let p = read_prediction(&pred.join(id))?;
        let (z, d) = truth.get(id, index.pairing)?;
        let disp = p.disparity.as_ref().zip(d.as_ref());
        match compute_metrics(
            &p.depth,
            &z,
            disp.map(|x| x.0),
            disp.map(|x| x.1),
            &DEFAULT_THRESHOLDS,
        ) {
            Ok(r) => {
                reports.push(r.clone());
                per_sample.insert(id.clone(), r);
            }
            Err(NslError::EmptyMask(_)) => skipped.push(id.clone()),
            Err(e) => return Err(e),
        }
    }
    if reports.is_empty() {
        return Err(NslError::EmptyMask(
            "no sample has valid pixels to evaluate".into(),
        ));
    }
    Ok(EvalReport {
        method: index.method,
        per_image_mean: aggregate(&reports, Weighting::PerImageMean)?,
        pixel_pooled: aggregate(&reports, Weighting::PixelPooled)?,
        skipped,
        per_sample,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}
