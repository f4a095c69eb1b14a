//! Run configuration: built-in defaults, overlaid by a JSON file, overlaid
//! by `--set key.path=value` pairs, overlaid by dedicated command-line flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dosediff::denoiser::DenoiserConfig;
use dosediff::phantom::{DataConfig, Split};
use dosediff::prior::{PriorConfig, PriorTrainConfig};
use dosediff::sampler::SampleConfig;
use dosediff::schedule::ScheduleConfig;
use dosediff::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// Count fractions to denoise and score (all dataset fractions if unset).
    pub fractions: Option<Vec<f64>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            fractions: None,
        }
    }
}

/// Every knob of the pipeline. Section seeds are replaced by the root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub prior: PriorConfig,
    pub prior_train: PriorTrainConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("invalid config key {path:?}");
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(map) => map,
            other => {
                *other = Value::Object(Default::default());
                other.as_object_mut().unwrap()
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

impl RunConfig {
    /// Defaults overlaid by `file` and then by `key.path=value` pairs. Values
    /// are parsed as JSON, falling back to a plain string.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut value = match file {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => Value::Object(Default::default()),
        };
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key.trim(), v)?;
        }
        serde_json::from_value(value).context("invalid configuration")
    }

    /// Propagates shared settings into the sections that need them.
    pub fn finalize(&mut self) {
        self.train.window = self.model.window;
        self.train.schedule = self.schedule.clone();
        self.sample.window = self.model.window;
        self.train.seed = self.seed;
        self.prior_train.seed = self.seed;
        self.sample.seed = self.seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_paths_create_and_overwrite() {
        let mut v = serde_json::json!({"train": {"steps": 3}});
        set_path(&mut v, "train.steps", serde_json::json!(7)).unwrap();
        set_path(&mut v, "sample.ablation.no_dose", serde_json::json!(true)).unwrap();
        assert_eq!(v["train"]["steps"], 7);
        assert_eq!(v["sample"]["ablation"]["no_dose"], true);
        assert!(set_path(&mut v, "a..b", Value::Null).is_err());
    }

    #[test]
    fn unknown_top_level_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"trian": {}}"#).unwrap();
        assert!(RunConfig::resolve(Some(&p), &[]).is_err());
    }
}
