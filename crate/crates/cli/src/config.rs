//! Run configuration: one JSON document covering every stage.

use std::path::Path;

use nsl_core::classical::{BlockMatchConfig, PseudoGtConfig};
use nsl_core::dataset::DatasetConfig;
use nsl_core::matcher::{MatcherConfig, TrainConfig};
use nsl_core::refine::{RefinerConfig, Stage2Config};
use nsl_core::{NslError, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub matcher: MatcherConfig,
    pub refiner: RefinerConfig,
    pub stage1: TrainConfig,
    pub stage2: Stage2Config,
    pub block_match: BlockMatchConfig,
    pub tm: TmConfig,
    pub pseudo_gt: PseudoGtSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TmConfig {
    /// Depth jump (meters) between neighbors above which TM pixels are dropped.
    pub grad_thresh: f64,
}

impl Default for TmConfig {
    fn default() -> Self {
        Self { grad_thresh: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoGtSettings {
    /// Number of alacarte patterns in the temporal stack.
    pub patterns: usize,
    pub max_disp: usize,
    pub lrc_tol: f64,
    pub grad_thresh: f64,
}

impl Default for PseudoGtSettings {
    fn default() -> Self {
        let d = PseudoGtConfig::default();
        Self {
            patterns: 32,
            max_disp: d.max_disp,
            lrc_tol: d.lrc_tol,
            grad_thresh: d.grad_thresh,
        }
    }
}

impl PseudoGtSettings {
    pub fn decode(&self) -> PseudoGtConfig {
        PseudoGtConfig {
            max_disp: self.max_disp,
            lrc_tol: self.lrc_tol,
            grad_thresh: self.grad_thresh,
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional JSON file, then `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| NslError::io(path, e))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| NslError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut doc, file);
        }
        for kv in overrides {
            apply_override(&mut doc, kv)?;
        }
        if let Some(seed) = seed {
            doc["seed"] = Value::from(seed);
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| NslError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.matcher.validate()?;
        self.refiner.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.pseudo_gt.patterns < 2 {
            return Err(NslError::Config(
                "pseudo_gt.patterns must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
fn apply_override(doc: &mut Value, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| NslError::Config(format!("override `{kv}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *doc;
    for part in key.split('.') {
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| NslError::Config(format!("`{key}` does not name a config field")))?;
        if !obj.contains_key(part) {
            return Err(NslError::Config(format!("unknown config key `{key}`")));
        }
        slot = obj.get_mut(part).expect("checked");
    }
    *slot = value;
    Ok(())
}
