//! Training configuration as a flat map of dotted keys.
//!
//! Precedence, lowest first: built-in defaults, the config file, the ablation
//! preset, dedicated flags (`--iters`, `--seed`), then `--set` overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mtt_core::engine::TrainConfig;
use serde_json::{Map, Value};

/// Invalid invocation or configuration; maps to the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub type FlatConfig = BTreeMap<String, Value>;

/// Nested objects become dotted keys; arrays and scalars are leaves.
pub fn flatten(value: &Value) -> FlatConfig {
    fn walk(prefix: &str, value: &Value, out: &mut FlatConfig) {
        match value {
            Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            leaf => {
                out.insert(prefix.to_string(), leaf.clone());
            }
        }
    }
    let mut out = FlatConfig::new();
    walk("", value, &mut out);
    out
}

pub fn unflatten(flat: &FlatConfig) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), value.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("dotted keys never collide with leaves");
            }
        }
    }
    Value::Object(root)
}

pub fn to_flat(config: &TrainConfig) -> FlatConfig {
    flatten(&serde_json::to_value(config).expect("config serializes"))
}

pub fn from_flat(flat: &FlatConfig) -> Result<TrainConfig> {
    let config: TrainConfig =
        serde_json::from_value(unflatten(flat)).map_err(|e| usage(format!("invalid configuration: {e}")))?;
    config.validate().map_err(|e| usage(format!("invalid configuration: {e}")))?;
    Ok(config)
}

/// Sets `key` to `value`, rejecting keys the configuration does not have.
fn assign(flat: &mut FlatConfig, key: &str, value: Value, origin: &str) -> Result<()> {
    match flat.get_mut(key) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(usage(format!("unknown configuration key `{key}` in {origin}"))),
    }
}

/// Parses `key=value`; the value is read as JSON, or taken as a string when that fails.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| usage(format!("override `{raw}` is not of the form key=value")))?;
    let value = serde_json::from_str(value.trim()).unwrap_or_else(|_| Value::String(value.trim().to_string()));
    Ok((key.trim().to_string(), value))
}

#[derive(Clone, Debug, Default)]
pub struct ConfigSources<'a> {
    pub file: Option<&'a Path>,
    pub ablation: Option<u8>,
    pub iters: Option<usize>,
    pub seed: Option<u64>,
    pub overrides: &'a [String],
}

pub fn resolve(sources: &ConfigSources<'_>) -> Result<TrainConfig> {
    let mut flat = to_flat(&TrainConfig::desk());
    if let Some(path) = sources.file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: Map<String, Value> = serde_json::from_str(&text)
            .map_err(|e| usage(format!("config {} is not a JSON object: {e}", path.display())))?;
        let origin = path.display().to_string();
        for (key, value) in file {
            assign(&mut flat, &key, value, &origin)?;
        }
    }
    if let Some(setting) = sources.ablation {
        let config = from_flat(&flat)?.with_ablation(setting).map_err(|e| usage(e.to_string()))?;
        flat = to_flat(&config);
    }
    if let Some(iters) = sources.iters {
        assign(&mut flat, "total_iters", iters.into(), "--iters")?;
    }
    if let Some(seed) = sources.seed {
        assign(&mut flat, "seed", seed.into(), "--seed")?;
    }
    for raw in sources.overrides {
        let (key, value) = parse_override(raw)?;
        assign(&mut flat, &key, value, "--set")?;
    }
    from_flat(&flat)
}
