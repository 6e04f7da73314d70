//! Run configuration: JSON file plus `section.field=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Environment variable that replaces `train.seed`.
pub const SEED_ENV: &str = "MGK_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub l2: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 32,
            base_lr: 0.001,
            l2: 0.001,
            bn_momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub k: usize,
    pub sigma: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: 10, sigma: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub cube: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Directory that receives logs, reports and maps.
    pub output: Option<PathBuf>,
}

impl PathsConfig {
    /// The path stored under `field`, or a config error naming it.
    pub fn require(&self, field: &str) -> Result<&Path> {
        let value = match field {
            "cube" => &self.cube,
            "labels" => &self.labels,
            "split" => &self.split,
            "checkpoint" => &self.checkpoint,
            "output" => &self.output,
            _ => return Err(Error::config(format!("unknown path field {field:?}"))),
        };
        value
            .as_deref()
            .ok_or_else(|| Error::config(format!("paths.{field} is not set")))
    }
}

/// `model.input_bands` and `model.classes` left at 0 are filled in from the
/// dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub graph: GraphConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::config("train.batch must be positive"));
        }
        if !(t.base_lr >= 0.0 && t.base_lr.is_finite()) {
            return Err(Error::config(format!("train.base_lr {} must be finite and >= 0", t.base_lr)));
        }
        if !(t.l2 >= 0.0 && t.l2.is_finite()) {
            return Err(Error::config(format!("train.l2 {} must be finite and >= 0", t.l2)));
        }
        if !(0.0..=1.0).contains(&t.bn_momentum) {
            return Err(Error::config(format!("train.bn_momentum {} must lie in [0, 1]", t.bn_momentum)));
        }
        if self.graph.k == 0 {
            return Err(Error::config("graph.k must be positive"));
        }
        if !(self.graph.sigma > 0.0 && self.graph.sigma.is_finite()) {
            return Err(Error::config(format!("graph.sigma {} must be positive", self.graph.sigma)));
        }
        Ok(())
    }

    /// Defaults, then `file` (if any), then `MGK_SEED` from `env_seed`, then
    /// `overrides` of the form `section.field=value`.
    pub fn resolve(file: Option<&str>, env_seed: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(text) = file {
            let parsed: Value = serde_json::from_str(text)
                .map_err(|e| Error::config(format!("config file: {e}")))?;
            merge(&mut value, parsed);
        }
        if let Some(seed) = env_seed {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
            value["train"]["seed"] = Value::from(seed);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(text.as_deref(), env.as_deref(), overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
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

/// Applies `a.b=v`. `v` is read as JSON when it parses, otherwise as a string.
fn apply_override(root: &mut Value, text: &str) -> Result<()> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {text:?} is not key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key {key:?} is malformed")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        node = node
            .get_mut(*part)
            .filter(|v| v.is_object())
            .ok_or_else(|| Error::config(format!("unknown config section {key:?}")))?;
    }
    let leaf = parts[parts.len() - 1];
    let obj = node.as_object_mut().expect("checked object");
    if !obj.contains_key(leaf) {
        return Err(Error::config(format!("unknown config key {key:?}")));
    }
    let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    obj.insert(leaf.to_string(), v);
    Ok(())
}
