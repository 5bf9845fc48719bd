//! Run configuration: built-in defaults, then a TOML file, then flag overrides.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{FlexMode, ModelConfig};
use crate::data::SyntheticSpec;
use crate::flexify_training::{Objective, TrainConfig};
use crate::scheduler_guidance::DEFAULT_RATIO;

pub const DEFAULT_STEPS: usize = 250;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlexifyConfig {
    pub mode: FlexMode,
    pub seed: u64,
}

impl Default for FlexifyConfig {
    fn default() -> Self {
        Self { mode: FlexMode::Lora, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Must match the checkpoint's step count when set.
    pub steps: Option<usize>,
    /// Plan text; unset means every step powerful.
    pub plan: Option<String>,
    pub cfg_scale: Option<f64>,
    pub cfg_ratio: f64,
    pub seed: u64,
    pub count: usize,
    /// Unset cycles through the classes.
    pub class: Option<usize>,
    pub packing: String,
    pub sampler: String,
    /// Sample from the EMA weights when the checkpoint has them.
    pub ema: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: None,
            plan: None,
            cfg_scale: None,
            cfg_ratio: DEFAULT_RATIO,
            seed: 0,
            count: 8,
            class: None,
            packing: "2".into(),
            sampler: "ddpm".into(),
            ema: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub flexify: FlexifyConfig,
    /// Fine-tuning after flexification.
    pub finetune: TrainConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig { steps: DEFAULT_STEPS, ..ModelConfig::default() },
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            flexify: FlexifyConfig::default(),
            finetune: TrainConfig { objective: Objective::Distill, ..TrainConfig::default() },
            sample: SampleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// Effective configuration plus where each non-default key came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Layered {
    pub config: RunConfig,
    /// Dotted key to `"file"` or `"flag"`.
    pub sources: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Parse a flag value the way it would be written in the file; bare words become strings.
pub fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table, prefix: &str, source: &str, sources: &mut BTreeMap<String, String>) {
    for (k, v) in over {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &key, source, sources),
            (_, v) => {
                sources.insert(key, source.to_string());
                base.insert(k, v);
            }
        }
    }
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| ConfigError(format!("empty key {key:?}")))?;
    let mut t = root;
    for p in parts {
        t = match t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(inner) => inner,
            _ => return Err(ConfigError(format!("{key}: {p} is not a section"))),
        };
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Defaults, overlaid by `file` (TOML text), overlaid by `flags` (dotted key, value).
pub fn resolve(file: Option<&str>, flags: &[(String, toml::Value)]) -> Result<Layered, ConfigError> {
    let mut root = match toml::Value::try_from(RunConfig::default()).expect("defaults serialize") {
        toml::Value::Table(t) => t,
        _ => unreachable!("config is a table"),
    };
    let mut sources = BTreeMap::new();
    if let Some(text) = file {
        let t: toml::Table = toml::from_str(text).map_err(|e| ConfigError(format!("config file: {e}")))?;
        merge(&mut root, t, "", "file", &mut sources);
    }
    for (k, v) in flags {
        set_dotted(&mut root, k, v.clone())?;
        sources.insert(k.clone(), "flag".into());
    }
    let config: RunConfig = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
    Ok(Layered { config, sources })
}
