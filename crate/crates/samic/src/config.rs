//! Run configuration: one file whose sections mirror the library's config
//! types, plus `key.path=value` overrides.

use std::path::Path;

use samic_core::net::NetConfig;
use samic_core::HeatmapConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::gateway::SegmenterConfig;
use crate::trainer::TrainConfig;

/// Evaluation keys that are not already part of another section. The shot
/// count comes from `train.shots` and the heatmap from `heatmap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self { seed: d.seed, split: d.split }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub heatmap: HeatmapConfig,
    pub segmenter: SegmenterConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Defaults, then the file (TOML or JSON by extension), then overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            None => Value::Object(Default::default()),
            Some(p) => parse_file(p)?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    /// Deserializes and rejects any key that no field consumed.
    pub fn from_value(value: Value) -> Result<Self> {
        let config: Self = serde_json::from_value(value.clone()).map_err(|e| Error::Config(e.to_string()))?;
        let known = serde_json::to_value(&config).expect("config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&value, &known, String::new(), &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown configuration keys: {}", unknown.join(", "))));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let core = |e: samic_core::Error| Error::Config(e.to_string());
        self.heatmap.validate().map_err(core)?;
        self.net.validate().map_err(core)?;
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            shots: self.train.shots,
            seed: self.eval.seed,
            split: self.eval.split.clone(),
            heatmap: self.heatmap,
        }
    }

    /// SHA-256 of the canonical JSON form; equal configs hash equal
    /// regardless of how they were written.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes").to_string();
        hex(&Sha256::digest(canonical.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value = if json {
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
    } else {
        let t: toml::Value = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        serde_json::to_value(t).map_err(|e| Error::format(path, e.to_string()))?
    };
    if !value.is_object() {
        return Err(Error::format(path, "configuration must be a table"));
    }
    Ok(value)
}

/// Applies `a.b.c=value`. The value is read as JSON when it parses
/// (numbers, booleans, arrays) and as a bare string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Argument(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Argument(format!("bad override key {key:?}")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let map = node.as_object_mut().ok_or_else(|| Error::Argument(format!("override {key:?} descends into a value")))?;
        node = map.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let map = node.as_object_mut().ok_or_else(|| Error::Argument(format!("override {key:?} descends into a value")))?;
    map.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn unknown_keys(given: &Value, known: &Value, prefix: String, out: &mut Vec<String>) {
    let (Value::Object(g), Value::Object(k)) = (given, known) else { return };
    for (name, v) in g {
        let path = if prefix.is_empty() { name.clone() } else { format!("{prefix}.{name}") };
        match k.get(name) {
            None => out.push(path),
            Some(kv) => unknown_keys(v, kv, path, out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("small.toml");
        std::fs::write(&p, "[train]\nseed = 3\nlr = 0.01\n[net]\ninput_size = [64, 64]\n").unwrap();
        let c = RunConfig::load(Some(&p), &["train.seed=7".into()]).unwrap();
        assert_eq!((c.train.seed, c.train.lr, c.net.input_size), (7, 0.01, (64, 64)));
        assert_eq!(c.train.patience, TrainConfig::default().patience);

        std::fs::write(&p, "[net]\nnum_4d_layers = 2\n").unwrap();
        let e = RunConfig::load(Some(&p), &[]).unwrap_err().to_string();
        assert!(e.contains("net.num_4d_layers"), "{e}");
        assert!(RunConfig::load(None, &["train.nope=1".into()]).is_err());
    }

    #[test]
    fn hash_ignores_spelling() {
        let a = RunConfig::load(None, &["heatmap.sigma=0.02".into()]).unwrap();
        assert_eq!(a.hash(), RunConfig::default().hash());
        let b = RunConfig::load(None, &["heatmap.sigma=0.03".into()]).unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn string_overrides_and_round_trip() {
        let c = RunConfig::load(None, &["segmenter.backend=external".into(), "eval.split=val".into()]).unwrap();
        assert_eq!(c.segmenter.backend, "external");
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
