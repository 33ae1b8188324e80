//! Hierarchical run configuration: defaults, then a TOML file, then dotted
//! `key=value` overrides. Unknown keys and type mismatches are errors that
//! name the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::bytepool::BytePoolConfig;
use crate::data::TrainConfig;
use crate::error::{config_err, Result};
use crate::model::{EmbedderKind, ModelConfig};

/// Environment variable that replaces `train.seed` when set.
pub const SEED_ENV: &str = "STLM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// A text file, or a directory whose files are documents.
    pub corpus: PathBuf,
    /// Merge table; empty means the plain byte vocabulary.
    pub merges: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub metrics: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.txt"),
            merges: PathBuf::new(),
            checkpoint_dir: PathBuf::from("checkpoints"),
            metrics: PathBuf::from("metrics.jsonl"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Only consulted when `model.embedder = "byte_pool"`.
    pub bytepool: BytePoolConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn bytepool(&self) -> Option<&BytePoolConfig> {
        (self.model.embedder == EmbedderKind::BytePool).then_some(&self.bytepool)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(bp) = self.bytepool() {
            bp.validate(&self.model)?;
        }
        self.train.validate(&self.model)
    }

    /// The resolved configuration as TOML; loading it back yields `self`.
    pub fn dump(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(format!("cannot serialize config: {e}")))
    }

    /// Replaces `train.seed` from [`SEED_ENV`] when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| config_err(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Writes `new` over `slot`, allowing integers where floats are expected.
fn assign(slot: &mut Value, new: Value, key: &str) -> Result<()> {
    let coerced = match (&*slot, new) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (Value::Table(_), Value::Table(t)) => {
            let Value::Table(dst) = slot else { unreachable!() };
            return merge(dst, t, key);
        }
        (old, new) if std::mem::discriminant(old) == std::mem::discriminant(&new) => new,
        (old, new) => {
            return Err(config_err(format!(
                "config key {key}: expected {}, got {}",
                type_name(old),
                type_name(&new)
            )))
        }
    };
    *slot = coerced;
    Ok(())
}

fn merge(dst: &mut Table, src: Table, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = dst
            .get_mut(&k)
            .ok_or_else(|| config_err(format!("unknown config key {key}")))?;
        assign(slot, v, &key)?;
    }
    Ok(())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (so `model.tying=none` works without quotes).
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(root: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| config_err("empty override key"))?;
    let mut table = root;
    for p in parts {
        table = match table.get_mut(p) {
            Some(Value::Table(t)) => t,
            _ => return Err(config_err(format!("unknown config key {key}"))),
        };
    }
    let slot = table
        .get_mut(last)
        .ok_or_else(|| config_err(format!("unknown config key {key}")))?;
    assign(slot, parse_value(raw.trim()), key)
}

/// Resolves defaults ← `file` ← `overrides` (left to right) and validates.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut root: Table = Table::try_from(RunConfig::default())
        .map_err(|e| config_err(format!("cannot serialize defaults: {e}")))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: Table =
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {}", path.display(), e.message())))?;
        merge(&mut root, parsed, "")?;
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: RunConfig = Value::Table(root)
        .try_into()
        .map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
