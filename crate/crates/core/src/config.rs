//! Run configuration: one flat JSON object whose keys are namespaced by
//! section, e.g. `{"sampler.n_max": 6, "train.episodes": 500}`.
//!
//! Sections are `synth`, `sampler`, `train`, `eval` and `paths`. The
//! training sampler policy always comes from the `sampler` section, and the
//! ablation mode from `eval.ablation`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Result, UrtError};
use crate::eval::DEFAULT_TASKS_PER_DOMAIN;
use crate::layer::Ablation;
use crate::sampler::SamplerPolicy;
use crate::store::{Split, SynthConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub split: Split,
    pub tasks_per_domain: usize,
    pub seed: u64,
    pub min_heads: usize,
    pub max_heads: usize,
    pub ablation: Ablation,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            split: Split::Test,
            tasks_per_domain: DEFAULT_TASKS_PER_DOMAIN,
            seed: 0,
            min_heads: 1,
            max_heads: 8,
            ablation: Ablation::None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub sampler: SamplerPolicy,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub paths: PathSettings,
}

/// Keys owned by another section.
const DERIVED_PREFIXES: [&str; 2] = ["train.policy", "train.ablation"];

fn is_derived(key: &str) -> bool {
    DERIVED_PREFIXES
        .iter()
        .any(|p| key == *p || key.starts_with(&format!("{p}.")))
}

fn insert_path(root: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut node = root;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(UrtError::Config(format!("malformed config key '{key}'")));
        }
        if parts.peek().is_none() {
            if node.insert(part.to_string(), value).is_some() {
                return Err(UrtError::Config(format!("config key '{key}' given twice")));
            }
            return Ok(());
        }
        let child = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        node = child.as_object_mut().ok_or_else(|| {
            UrtError::Config(format!("config key '{key}' conflicts with a scalar value"))
        })?;
    }
    unreachable!("split yields at least one part")
}

fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

impl RunConfig {
    /// Builds a config from flat `key → value` pairs on top of the defaults.
    pub fn from_flat(pairs: &BTreeMap<String, Value>) -> Result<Self> {
        let mut merged = RunConfig::default().echo();
        for (key, value) in pairs {
            if is_derived(key) {
                return Err(UrtError::Config(format!(
                    "config key '{key}' is not settable; use the sampler.* keys or eval.ablation"
                )));
            }
            if !merged.contains_key(key) && !key.starts_with("paths.") {
                return Err(UrtError::Config(format!("unknown config key '{key}'")));
            }
            merged.insert(key.clone(), value.clone());
        }
        let mut nested = Map::new();
        for (key, value) in merged {
            insert_path(&mut nested, &key, value)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(Value::Object(nested))
            .map_err(|e| UrtError::Config(format!("invalid config: {e}")))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| UrtError::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(map) = value else {
            return Err(UrtError::Config("config must be a JSON object".into()));
        };
        Self::from_flat(&map.into_iter().collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UrtError::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display()))
    }

    /// Applies `key=value` overrides; values are parsed as JSON and fall back
    /// to plain strings.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self> {
        let mut flat = self.echo();
        flat.extend(overrides.iter().cloned());
        Self::from_flat(&flat)
    }

    fn sync(&mut self) {
        self.train.policy = self.sampler.clone();
        self.train.ablation = self.eval.ablation;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.sampler.validate()?;
        self.train.validate()?;
        let e = &self.eval;
        if e.tasks_per_domain < 1 {
            return Err(UrtError::Config("eval.tasks_per_domain must be >= 1".into()));
        }
        if e.min_heads < 1 || e.max_heads < e.min_heads {
            return Err(UrtError::Config(format!(
                "eval.min_heads ({}) must be >= 1 and <= eval.max_heads ({})",
                e.min_heads, e.max_heads
            )));
        }
        Ok(())
    }

    /// Fully resolved config as flat keys, excluding the copies under `train`.
    pub fn echo(&self) -> BTreeMap<String, Value> {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = BTreeMap::new();
        flatten_into("", &value, &mut out);
        out.retain(|k, _| !is_derived(k));
        out
    }
}

/// Parses a `key=value` override.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| UrtError::Config(format!("override '{text}' is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flat_keys_set_nested_fields() {
        let cfg = RunConfig::from_json(
            r#"{"sampler.n_max": 6, "train.episodes": 50, "synth.samples_per_class.test": 12,
                "eval.split": "valid", "eval.ablation": "no_wk"}"#,
        )
        .unwrap();
        assert_eq!(cfg.sampler.n_max, 6);
        assert_eq!(cfg.train.policy.n_max, 6);
        assert_eq!(cfg.train.episodes, 50);
        assert_eq!(cfg.synth.samples_per_class.test, 12);
        assert_eq!(cfg.eval.split, Split::Valid);
        assert_eq!(cfg.train.ablation, Ablation::NoWk);
        assert_eq!(cfg.synth.classes_per_domain, SynthConfig::default().classes_per_domain);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::from_json(r#"{"train.lr0": 0.5, "paths.store": "s"}"#).unwrap();
        let echo = cfg.echo();
        assert_eq!(echo["train.lr0"], json!(0.5));
        assert_eq!(echo["paths.store"], json!("s"));
        assert!(!echo.keys().any(|k| k.starts_with("train.policy")));
        assert_eq!(RunConfig::from_flat(&echo).unwrap(), cfg);
    }

    #[test]
    fn rejections_are_config_errors() {
        for bad in [
            r#"{"sampler.bogus": 1}"#,
            r#"{"train.policy.n_max": 4}"#,
            r#"{"train.ablation": "no_wq"}"#,
            r#"{"sampler.n_min": 1}"#,
            r#"{"train.episodes": 0}"#,
            r#"{"eval.ablation": "bogus"}"#,
            r#"{"sampler": 3, "sampler.n_max": 4}"#,
            r#"[1, 2]"#,
            r#"{"#,
        ] {
            let err = RunConfig::from_json(bad).unwrap_err();
            assert!(matches!(err, UrtError::Config(_)), "{bad}: {err}");
        }
    }

    #[test]
    fn overrides_replace_values() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                parse_override("train.heads=4").unwrap(),
                parse_override("eval.split=valid").unwrap(),
                parse_override("paths.report=r.json").unwrap(),
            ])
            .unwrap();
        assert_eq!(cfg.train.heads, 4);
        assert_eq!(cfg.eval.split, Split::Valid);
        assert_eq!(cfg.paths.report.as_deref(), Some("r.json"));
        assert!(RunConfig::default()
            .with_overrides(&[parse_override("train.nope=1").unwrap()])
            .is_err());
        assert!(parse_override("novalue").is_err());
    }
}
