//! Run configuration addressed by flat dotted keys (`"model.d_model"`,
//! `"distill.epsilon"`, ...). A config file is a single JSON object of such
//! keys; flags are applied on top of it. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use ternary_llm::distill::DistillConfig;
use ternary_llm::model::ModelConfig;
use ternary_llm::quantizer::QuantMode;
use ternary_llm::train::TrainConfig;
use ternary_llm::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Training text; empty means a generated corpus.
    pub corpus: String,
    pub out_dir: String,
    pub teacher: String,
    pub checkpoint: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: String::new(),
            out_dir: "runs".into(),
            teacher: String::new(),
            checkpoint: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataOptions {
    pub val_fraction: f64,
    /// Size and seed of the generated corpus used when `paths.corpus` is empty.
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            synthetic_bytes: 400_000,
            synthetic_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantOptions {
    pub mode: QuantMode,
}

impl Default for QuantOptions {
    fn default() -> Self {
        Self { mode: QuantMode::Dlt }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckOptions {
    /// Random prompts for the packed-vs-dense logits self-check.
    pub pack_prompts: usize,
    pub pack_tolerance: f64,
    /// Input samples per layer for the normalized-error bound check.
    pub theorem_samples: usize,
    pub bench_tokens: usize,
    pub bench_repeats: usize,
    pub histogram_bins: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            pack_prompts: 16,
            pack_tolerance: 1e-4,
            theorem_samples: 256,
            bench_tokens: 64,
            bench_repeats: 5,
            histogram_bins: 41,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub quant: QuantOptions,
    pub data: DataOptions,
    pub paths: Paths,
    pub check: CheckOptions,
}

/// `train.distill.*` is exposed under the shorter `distill.*` prefix.
const NESTED_DISTILL: &str = "train.distill.";

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("object node");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

impl RunConfig {
    /// Every setting as a dotted key.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut full = self.clone();
        full.train.distill = DistillConfig::default();
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(&full).expect("config serializes"), &mut flat);
        flat.retain(|k, _| !k.starts_with(NESTED_DISTILL));
        flat
    }

    fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let mut tree = unflatten(flat);
        // the training config carries its own copy of the distill settings
        if let (Some(d), Some(Value::Object(train))) = (tree.get("distill").cloned(), tree.get_mut("train")) {
            train.insert("distill".into(), d);
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// Applies dotted-key overrides. Keys must already exist.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, Value)>) -> Result<Self> {
        let mut flat = self.to_flat();
        for (k, v) in overrides {
            match flat.get_mut(k) {
                Some(slot) => *slot = v,
                None => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        Self::from_flat(&flat)
    }

    /// Parses a JSON object of dotted keys over the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(m) = v else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        Self::default().with_overrides(m.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Canonical pretty JSON of every dotted key, sorted.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("config serializes")
    }

    /// SHA-256 of the compact canonical form.
    pub fn digest(&self) -> String {
        let compact = serde_json::to_string(&self.to_flat()).expect("config serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.distill.validate(self.model.n_layers)?;
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 0.5) {
            return Err(Error::Config("data.val_fraction must lie in (0, 0.5)".into()));
        }
        if self.train.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "train.seq_len {} exceeds model.max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.out_dir)
    }
}

/// Parses a `key=value` flag; the value is read as JSON, falling back to a
/// plain string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {s:?}")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_roundtrip_and_unknown_keys() {
        let c = RunConfig::default();
        let back = RunConfig::from_flat(&c.to_flat()).unwrap();
        assert_eq!(back, c);
        assert!(c.to_flat().contains_key("distill.epsilon"));
        assert!(!c.to_flat().keys().any(|k| k.starts_with(NESTED_DISTILL)));
        let err = RunConfig::from_json(r#"{"model.d_modle": 3}"#).unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("d_modle")));
    }

    #[test]
    fn overrides_reach_nested_training_config() {
        let c = RunConfig::from_json(r#"{"distill.delta": 5, "model.group_size": 0, "train.lr": 5e-5}"#).unwrap();
        assert_eq!(c.train.distill.delta, 5.0);
        assert_eq!(c.model.group_size, ternary_llm::GroupSpec::PerChannel);
        assert_eq!(c.train.lr, 5e-5);
        assert_ne!(c.digest(), RunConfig::default().digest());
    }

    #[test]
    fn type_errors_are_config_errors() {
        assert!(matches!(RunConfig::from_json(r#"{"train.lr": "fast"}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json("[1]"), Err(Error::Config(_))));
    }

    #[test]
    fn assignment_parsing() {
        assert_eq!(parse_assignment("train.lr=0.5").unwrap(), ("train.lr".into(), Value::from(0.5)));
        assert_eq!(parse_assignment("quant.mode=twn").unwrap().1, Value::from("twn"));
    }
}
