//! Input discovery and the prediction directory layout.
//!
//! ```text
//! <out>/prediction.json
//! <out>/<id>/{depth.pfm, mask_depth.png, disparity.pfm, mask_disparity.png}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nsl_core::checkpoint::write_atomic;
use nsl_core::dataset::{
    decode_mask_png, encode_mask_png, encode_pfm, read_pfm, read_sample_with_meta, Dataset, Split,
};
use nsl_core::geometry::Pairing;
use nsl_core::simulator::Sample;
use nsl_core::{DepthMap, DisparityMap, NslError, Result};
use serde::{Deserialize, Serialize};

pub const PREDICTION_INDEX: &str = "prediction.json";

pub struct Input {
    pub id: String,
    pub sample: Sample,
}

/// Samples of `split` from a dataset root, or the single sample at `path`.
pub fn load_inputs(path: &Path, split: Split) -> Result<Vec<Input>> {
    if path.join("manifest.json").is_file() {
        let ds = Dataset::open(path)?;
        return ds
            .records(split)
            .into_iter()
            .map(|r| {
                Ok(Input {
                    id: r.id.clone(),
                    sample: ds.read(r)?,
                })
            })
            .collect();
    }
    if path.join("meta.json").is_file() {
        let (sample, meta) = read_sample_with_meta(path)?;
        return Ok(vec![Input {
            id: meta.id,
            sample,
        }]);
    }
    Err(NslError::Config(format!(
        "{} is neither a dataset root nor a sample directory",
        path.display()
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionIndex {
    pub method: String,
    /// Pair the disparities refer to.
    pub pairing: Pairing,
    pub ids: Vec<String>,
}

pub struct Prediction {
    pub depth: DepthMap,
    pub disparity: Option<DisparityMap>,
}

pub fn write_prediction(
    dir: &Path,
    depth: &DepthMap,
    disparity: Option<&DisparityMap>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NslError::io(dir, e))?;
    let zeroed = |values: &nsl_core::Raster<f64>, mask: &nsl_core::ValidityMask| {
        nsl_core::Raster::from_fn(values.width(), values.height(), |x, y| {
            if mask.at(x, y) {
                values.at(x, y)
            } else {
                0.0
            }
        })
    };
    write_atomic(
        &dir.join("depth.pfm"),
        &encode_pfm(&zeroed(&depth.values, &depth.mask)),
    )?;
    write_atomic(&dir.join("mask_depth.png"), &encode_mask_png(&depth.mask)?)?;
    if let Some(d) = disparity {
        write_atomic(
            &dir.join("disparity.pfm"),
            &encode_pfm(&zeroed(&d.values, &d.mask)),
        )?;
        write_atomic(&dir.join("mask_disparity.png"), &encode_mask_png(&d.mask)?)?;
    }
    Ok(())
}

fn read_mask(path: &Path) -> Result<nsl_core::ValidityMask> {
    let bytes = fs::read(path).map_err(|e| NslError::io(path, e))?;
    decode_mask_png(&bytes, path)
}

pub fn read_prediction(dir: &Path) -> Result<Prediction> {
    let values = read_pfm(&dir.join("depth.pfm"))?;
    let depth = DepthMap::new(values, read_mask(&dir.join("mask_depth.png"))?)
        .map_err(|e| NslError::corrupt(dir, e.to_string()))?;
    let disparity = if dir.join("disparity.pfm").is_file() {
        let values = read_pfm(&dir.join("disparity.pfm"))?;
        Some(
            DisparityMap::new(values, read_mask(&dir.join("mask_disparity.png"))?)
                .map_err(|e| NslError::corrupt(dir, e.to_string()))?,
        )
    } else {
        None
    };
    Ok(Prediction { depth, disparity })
}

pub fn write_index(out: &Path, index: &PredictionIndex) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| NslError::io(out, e))?;
    write_atomic(
        &out.join(PREDICTION_INDEX),
        &serde_json::to_vec_pretty(index)?,
    )
}

pub fn read_index(dir: &Path) -> Result<PredictionIndex> {
    let path = dir.join(PREDICTION_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| NslError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| NslError::corrupt(&path, e.to_string()))
}

/// Copy a directory tree.
pub fn copy_tree(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(|e| NslError::io(to, e))?;
    let mut entries: Vec<PathBuf> = fs::read_dir(from)
        .map_err(|e| NslError::io(from, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| NslError::io(from, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for src in entries {
        let dst = to.join(src.file_name().expect("entry has a name"));
        if src.is_dir() {
            copy_tree(&src, &dst)?;
        } else {
            fs::copy(&src, &dst).map_err(|e| NslError::io(&src, e))?;
        }
    }
    Ok(())
}
