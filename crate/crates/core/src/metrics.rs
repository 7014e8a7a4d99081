//! Depth and disparity evaluation: MAE, RMSE, REL, δ-accuracy and EPE.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{NslError, Result};
use crate::geometry::{DepthMap, DisparityMap};

/// The δ thresholds reported in the result tables.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [1.25, 1.10, 1.05];

/// Column order of the text table.
pub const TABLE_COLUMNS: [&str; 7] = ["MAE(m)", "RMSE", "REL", "δ1.25", "δ1.10", "δ1.05", "EPE"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub rel: f64,
    /// Threshold (formatted with two decimals) to fraction of pixels below it.
    pub delta: BTreeMap<String, f64>,
    /// Mean absolute disparity error; `None` when no disparities were supplied.
    pub epe: Option<f64>,
    pub valid_pixel_count: usize,
    /// Pixel-pooled accumulators, kept so reports can be re-aggregated exactly.
    #[serde(default)]
    pub sums: PooledSums,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PooledSums {
    pub abs: f64,
    pub sq: f64,
    pub rel: f64,
    pub delta_hits: BTreeMap<String, f64>,
    pub epe_abs: f64,
    pub epe_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    PerImageMean,
    PixelPooled,
}

pub fn delta_key(threshold: f64) -> String {
    format!("{threshold:.2}")
}

impl MetricReport {
    pub fn delta_at(&self, threshold: f64) -> Option<f64> {
        self.delta.get(&delta_key(threshold)).copied()
    }

    /// One row of the aligned text table.
    pub fn table_row(&self, label: &str) -> String {
        let mut row = format!("{label:<28}");
        let mut push = |v: Option<f64>| {
            let _ = match v {
                Some(v) => write!(row, " {v:>9.4}"),
                None => write!(row, " {:>9}", "-"),
            };
        };
        push(Some(self.mae));
        push(Some(self.rmse));
        push(Some(self.rel));
        for t in DEFAULT_THRESHOLDS {
            push(self.delta_at(t));
        }
        push(self.epe);
        row
    }
}

pub fn table_header() -> String {
    let mut header = format!("{:<28}", "Method");
    for c in TABLE_COLUMNS {
        let _ = write!(header, " {c:>9}");
    }
    header
}

/// Aligned text table with the header and one row per `(label, report)`.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let mut out = table_header();
    out.push('\n');
    for (label, report) in rows {
        out.push_str(&report.table_row(label));
        out.push('\n');
    }
    out
}

/// Metrics over the joint valid mask of `depth` and `depth_gt` (and, when
/// given, of the disparity pair for EPE).
pub fn compute_metrics(
    depth: &DepthMap,
    depth_gt: &DepthMap,
    disp: Option<&DisparityMap>,
    disp_gt: Option<&DisparityMap>,
    thresholds: &[f64],
) -> Result<MetricReport> {
    if depth.values.dims() != depth_gt.values.dims() {
        return Err(NslError::Shape(
            "prediction and ground truth differ in shape".into(),
        ));
    }
    let mut sums = PooledSums::default();
    let mut hits = vec![0.0; thresholds.len()];
    let mut count = 0usize;
    let (w, h) = depth.values.dims();
    for y in 0..h {
        for x in 0..w {
            let (Some(p), Some(g)) = (depth.valid_at(x, y), depth_gt.valid_at(x, y)) else {
                continue;
            };
            if g <= 0.0 {
                return Err(NslError::Config(format!(
                    "non-positive ground-truth depth {g} at ({x},{y})"
                )));
            }
            let err = p - g;
            sums.abs += err.abs();
            sums.sq += err * err;
            sums.rel += err.abs() / g;
            let ratio = if p > 0.0 {
                (p / g).max(g / p)
            } else {
                f64::INFINITY
            };
            for (hit, &t) in hits.iter_mut().zip(thresholds) {
                if ratio < t {
                    *hit += 1.0;
                }
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(NslError::EmptyMask("no jointly valid depth pixels".into()));
    }
    if let (Some(d), Some(dg)) = (disp, disp_gt) {
        if d.values.dims() != dg.values.dims() {
            return Err(NslError::Shape("disparity maps differ in shape".into()));
        }
        for y in 0..h.min(d.height()) {
            for x in 0..w.min(d.width()) {
                let both = depth.mask.at(x, y) && depth_gt.mask.at(x, y);
                if let (true, Some(a), Some(b)) = (both, d.valid_at(x, y), dg.valid_at(x, y)) {
                    sums.epe_abs += (a - b).abs();
                    sums.epe_count += 1;
                }
            }
        }
    }
    for (&t, &hit) in thresholds.iter().zip(&hits) {
        sums.delta_hits.insert(delta_key(t), hit);
    }
    Ok(finish(sums, count))
}

fn finish(sums: PooledSums, count: usize) -> MetricReport {
    let n = count as f64;
    let delta = sums
        .delta_hits
        .iter()
        .map(|(k, &v)| (k.clone(), v / n))
        .collect();
    MetricReport {
        mae: sums.abs / n,
        rmse: (sums.sq / n).sqrt(),
        rel: sums.rel / n,
        delta,
        epe: (sums.epe_count > 0).then(|| sums.epe_abs / sums.epe_count as f64),
        valid_pixel_count: count,
        sums,
    }
}

/// Combine per-image reports.
pub fn aggregate(reports: &[MetricReport], weighting: Weighting) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(NslError::Config(
            "cannot aggregate an empty report list".into(),
        ));
    }
    match weighting {
        Weighting::PixelPooled => {
            let mut sums = PooledSums::default();
            let mut count = 0;
            for r in reports {
                sums.abs += r.sums.abs;
                sums.sq += r.sums.sq;
                sums.rel += r.sums.rel;
                sums.epe_abs += r.sums.epe_abs;
                sums.epe_count += r.sums.epe_count;
                for (k, v) in &r.sums.delta_hits {
                    *sums.delta_hits.entry(k.clone()).or_default() += v;
                }
                count += r.valid_pixel_count;
            }
            Ok(finish(sums, count))
        }
        Weighting::PerImageMean => {
            let n = reports.len() as f64;
            let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
            let mut delta = BTreeMap::new();
            for key in reports[0].delta.keys() {
                delta.insert(
                    key.clone(),
                    mean(&|r| r.delta.get(key).copied().unwrap_or(0.0)),
                );
            }
            let epes: Vec<f64> = reports.iter().filter_map(|r| r.epe).collect();
            let mut sums = PooledSums::default();
            for r in reports {
                sums.abs += r.sums.abs;
                sums.sq += r.sums.sq;
                sums.rel += r.sums.rel;
                sums.epe_abs += r.sums.epe_abs;
                sums.epe_count += r.sums.epe_count;
                for (k, v) in &r.sums.delta_hits {
                    *sums.delta_hits.entry(k.clone()).or_default() += v;
                }
            }
            Ok(MetricReport {
                mae: mean(&|r| r.mae),
                rmse: mean(&|r| r.rmse),
                rel: mean(&|r| r.rel),
                delta,
                epe: (!epes.is_empty()).then(|| epes.iter().sum::<f64>() / epes.len() as f64),
                valid_pixel_count: reports.iter().map(|r| r.valid_pixel_count).sum(),
                sums,
            })
        }
    }
}
