//! Flat `key = value` run configuration.
//!
//! Keys are dotted paths: `arch.*`, `spt.*` and `rpt.*` for the stage
//! configs, plus the top-level `seed`, `data`, `out` and `kcore`. Optional
//! values are written as `none`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::posttrain::RptConfig;
use crate::pretrain::SptConfig;
use crate::reasoner::ArchitectureConfig;

/// Keys left out of the config hash because they only locate files.
const LOCATION_KEYS: [&str; 2] = ["data", "out"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: ArchitectureConfig,
    pub spt: SptConfig,
    pub rpt: RptConfig,
    /// Master seed; overrides the per-stage seeds.
    pub seed: u64,
    /// Preprocessed dataset directory.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// k-core threshold used by `preprocess`.
    pub kcore: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ArchitectureConfig::default(),
            spt: SptConfig::default(),
            rpt: RptConfig::default(),
            seed: 0,
            data: None,
            out: None,
            kcore: 5,
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Reads `text` as a value of the same JSON kind as `current`.
fn coerce(key: &str, current: &Value, text: &str) -> Result<Value> {
    let text = text.trim();
    let bad = || Error::Config(format!("bad value `{text}` for `{key}`"));
    if text == "none" {
        return Ok(Value::Null);
    }
    let number = || -> Result<Value> {
        if let Ok(u) = text.parse::<u64>() {
            return Ok(u.into());
        }
        let f: f64 = text.parse().map_err(|_| bad())?;
        serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(bad)
    };
    match current {
        Value::Number(_) => number(),
        Value::Bool(_) => text.parse::<bool>().map(Value::Bool).map_err(|_| bad()),
        Value::String(_) => Ok(Value::String(text.to_string())),
        _ => number().or_else(|_| Ok(Value::String(text.to_string()))),
    }
}

impl RunConfig {
    /// Every key with its rendered value, in canonical order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut flat = Vec::new();
        flatten("", &v, &mut flat);
        flat.into_iter().map(|(k, v)| (k, render(&v))).collect()
    }

    pub fn keys() -> Vec<String> {
        Self::default().pairs().into_iter().map(|(k, _)| k).collect()
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies overrides in order; unknown keys and ill-typed values are
    /// rejected and leave `self` unchanged.
    pub fn apply<K: AsRef<str>, V: AsRef<str>>(&mut self, overrides: &[(K, V)]) -> Result<()> {
        let mut v = serde_json::to_value(&*self).expect("config serializes");
        for (key, text) in overrides {
            let key = key.as_ref().trim();
            let mut node = &mut v;
            for part in key.split('.') {
                node = match node {
                    Value::Object(m) => m.get_mut(part),
                    _ => None,
                }
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            if node.is_object() {
                return Err(Error::Config(format!("`{key}` is a section, not a key")));
            }
            *node = coerce(key, node, text.as_ref())?;
        }
        let next: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, message: format!("expected `key = value`, got `{line}`") })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        cfg.apply(&pairs)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.spt.validate()?;
        self.rpt.validate()?;
        if self.kcore == 0 {
            return Err(Error::Config("kcore must be >= 1".into()));
        }
        Ok(())
    }

    /// Stage configs with the master seed applied.
    pub fn spt_config(&self) -> SptConfig {
        SptConfig { seed: self.seed, ..self.spt.clone() }
    }

    pub fn rpt_config(&self) -> RptConfig {
        RptConfig { seed: self.seed, ..self.rpt.clone() }
    }

    /// Hex SHA-256 of the canonical text without file locations.
    pub fn hash(&self) -> String {
        let text: String = self
            .pairs()
            .into_iter()
            .filter(|(k, _)| !LOCATION_KEYS.contains(&k.as_str()))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Map of every key, for JSON sidecars.
    pub fn to_json_map(&self) -> Map<String, Value> {
        self.pairs().into_iter().map(|(k, v)| (k, Value::String(v))).collect()
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
