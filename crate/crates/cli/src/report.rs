//! Ablation tables and qualitative figure grids.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use nsl_core::checkpoint::{write_atomic, Checkpoint};
use nsl_core::dataset::{Dataset, Split};
use nsl_core::matcher::{MatcherMode, MatcherParams};
use nsl_core::metrics::{
    aggregate, compute_metrics, format_table, MetricReport, Weighting, DEFAULT_THRESHOLDS,
};
use nsl_core::refine::RefinerParams;
use nsl_core::simulator::Sample;
use nsl_core::{DepthMap, DisparityMap, Image, NslError, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{predict, stage1_path, stage2_path, tm_prediction, write_json};
use crate::config::RunConfig;

/// Depth range mapped onto the gray ramp of figure tiles.
const DEPTH_RANGE: (f64, f64) = (0.3, 3.0);
/// Absolute depth error (meters) at the top of the error color ramp.
const ERROR_MAX: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub shard: String,
    pub samples: usize,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Validation shard, one row per method.
    pub overall: Vec<ReportRow>,
    /// One row per method and pattern kind, over validation and held-out shards.
    pub per_pattern: Vec<ReportRow>,
}

type Predictor<'a> = Box<dyn Fn(&Sample) -> Result<(DepthMap, DisparityMap)> + Sync + 'a>;

struct Method<'a> {
    name: String,
    predict: Predictor<'a>,
    /// Ground-truth disparity the method's output is compared with.
    pairing: nsl_core::geometry::Pairing,
}

fn methods<'a>(cfg: &'a RunConfig, runs: &Path) -> Result<Vec<Method<'a>>> {
    let mut out: Vec<Method<'a>> = vec![Method {
        name: "TM".into(),
        predict: Box::new(move |s| tm_prediction(cfg, s)),
        pairing: nsl_core::geometry::Pairing::CameraProjector,
    }];
    for mode in MatcherMode::ALL {
        let p1 = stage1_path(runs, mode);
        if !p1.is_file() {
            continue;
        }
        let s1 = MatcherParams::from_checkpoint(&Checkpoint::load(&p1)?)?;
        if s1.config.mode != mode {
            return Err(NslError::Config(format!(
                "{} holds a {} matcher",
                p1.display(),
                s1.config.mode
            )));
        }
        let p2 = stage2_path(runs, mode);
        let s2 = if p2.is_file() {
            Some(RefinerParams::from_checkpoint(&Checkpoint::load(&p2)?)?)
        } else {
            None
        };
        let a = s1.clone();
        out.push(Method {
            name: format!("{mode} / stage 1"),
            predict: Box::new(move |s| predict(&a, None, s)),
            pairing: mode.pairing(),
        });
        if let Some(r) = s2 {
            out.push(Method {
                name: format!("{mode} / stage 2"),
                predict: Box::new(move |s| predict(&s1, Some(&r), s)),
                pairing: mode.pairing(),
            });
        }
    }
    Ok(out)
}

fn target(s: &Sample, pairing: nsl_core::geometry::Pairing) -> &DisparityMap {
    match pairing {
        nsl_core::geometry::Pairing::CameraProjector => &s.disp_gt_lp,
        nsl_core::geometry::Pairing::CameraCamera => &s.disp_gt_lr,
    }
}

fn row(method: &str, shard: &str, reports: &[MetricReport]) -> Result<Option<ReportRow>> {
    if reports.is_empty() {
        return Ok(None);
    }
    Ok(Some(ReportRow {
        method: method.to_string(),
        shard: shard.to_string(),
        samples: reports.len(),
        metrics: aggregate(reports, Weighting::PerImageMean)?,
    }))
}

pub fn report(
    cfg: &RunConfig,
    data: &Path,
    runs: &Path,
    out: &Path,
    grid: usize,
) -> Result<Report> {
    let ds = Dataset::open(data)?;
    let val = ds.load_split(Split::Val)?;
    let test = ds.load_split(Split::Test)?;
    let methods = methods(cfg, runs)?;
    let mut overall = Vec::new();
    let mut per_pattern = Vec::new();
    std::fs::create_dir_all(out.join("figures")).map_err(|e| NslError::io(out, e))?;
    for m in &methods {
        eprintln!("evaluating {}", m.name);
        let mut by_pattern: BTreeMap<String, Vec<MetricReport>> = BTreeMap::new();
        let mut val_reports = Vec::new();
        for (shard, samples) in [("val", &val), ("test", &test)] {
            let preds: Vec<(DepthMap, DisparityMap)> = samples
                .par_iter()
                .map(|s| (m.predict)(s))
                .collect::<Result<_>>()?;
            for (s, (z, d)) in samples.iter().zip(&preds) {
                match compute_metrics(
                    z,
                    &s.depth_gt,
                    Some(d),
                    Some(target(s, m.pairing)),
                    &DEFAULT_THRESHOLDS,
                ) {
                    Ok(r) => {
                        by_pattern
                            .entry(s.pattern_id.clone())
                            .or_default()
                            .push(r.clone());
                        if shard == "val" {
                            val_reports.push(r);
                        }
                    }
                    Err(NslError::EmptyMask(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if shard == "val" && grid > 0 {
                let n = grid.min(samples.len());
                let depths: Vec<&DepthMap> = preds.iter().take(n).map(|p| &p.0).collect();
                let png = figure_grid(&samples[..n], &depths)?;
                let name = m.name.replace(" / ", "_").replace(' ', "_");
                write_atomic(&out.join("figures").join(format!("{name}.png")), &png)?;
            }
        }
        overall.extend(row(&m.name, "val", &val_reports)?);
        for (pattern, reports) in &by_pattern {
            per_pattern.extend(row(&m.name, pattern, reports)?);
        }
    }
    let report = Report {
        overall,
        per_pattern,
    };
    write_json(&out.join("report.json"), &report)?;
    write_atomic(&out.join("report.md"), report.markdown().as_bytes())?;
    Ok(report)
}

impl Report {
    pub fn markdown(&self) -> String {
        let table = |rows: &[ReportRow], label: &dyn Fn(&ReportRow) -> String| {
            let rows: Vec<(String, MetricReport)> =
                rows.iter().map(|r| (label(r), r.metrics.clone())).collect();
            format_table(&rows)
        };
        format!(
            "# Evaluation report\n\n## Input configurations and stages (validation shard)\n\n```text\n{}```\n\n## Per pattern\n\n```text\n{}```\n",
            table(&self.overall, &|r| r.method.clone()),
            table(&self.per_pattern, &|r| format!("{} [{}]", r.method, r.shard)),
        )
    }
}

fn gray(v: f64) -> Rgb<u8> {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([g, g, g])
}

/// Black, red, yellow, white ramp over `[0, 1]`.
fn heat(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0) * 3.0;
    let c = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([c(t), c(t - 1.0), c(t - 2.0)])
}

fn depth_color(z: Option<f64>) -> Rgb<u8> {
    match z {
        // near is bright
        Some(z) => gray(1.0 - (z - DEPTH_RANGE.0) / (DEPTH_RANGE.1 - DEPTH_RANGE.0)),
        None => Rgb([0, 0, 96]),
    }
}

/// One row per sample: IR image, ground truth, prediction, absolute error.
pub fn figure_grid(samples: &[Sample], preds: &[&DepthMap]) -> Result<Vec<u8>> {
    let first = samples
        .first()
        .ok_or_else(|| NslError::Config("no samples for the figure".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut img = RgbImage::new((4 * w) as u32, (samples.len() * h) as u32);
    let mut tile = |row: usize, col: usize, f: &dyn Fn(usize, usize) -> Rgb<u8>| {
        for y in 0..h {
            for x in 0..w {
                img.put_pixel((col * w + x) as u32, (row * h + y) as u32, f(x, y));
            }
        }
    };
    for (r, (s, p)) in samples.iter().zip(preds).enumerate() {
        if s.width() != w || s.height() != h {
            return Err(NslError::Shape("figure samples differ in size".into()));
        }
        let ir: &Image = &s.ir_left;
        tile(r, 0, &|x, y| gray(ir.at(x, y)));
        tile(r, 1, &|x, y| depth_color(s.depth_gt.valid_at(x, y)));
        tile(r, 2, &|x, y| depth_color(p.valid_at(x, y)));
        tile(
            r,
            3,
            &|x, y| match (p.valid_at(x, y), s.depth_gt.valid_at(x, y)) {
                (Some(a), Some(b)) => heat((a - b).abs() / ERROR_MAX),
                _ => Rgb([0, 0, 96]),
            },
        );
    }
    let mut bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    Ok(bytes)
}
