//! Mission config loading: JSON file, then `--set key=value` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{Map, Value};

use canopy_sim::mission::MissionConfig;

/// Splits `a.b.c=value`. The value is parsed as JSON when it can be and
/// taken as a plain string otherwise, so `--set world.name=forest` works
/// without quoting.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("override {s:?} is not key=value"))?;
    let path: Vec<String> = key.split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        bail!("override {s:?} has an empty key segment");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((path, value))
}

/// Sets `value` at `path`, creating intermediate objects as needed.
pub fn apply_override(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut node = root;
    for (i, key) in path.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Map::new());
            } else {
                bail!("cannot set {}: {} is not an object", path.join("."), path[..i].join("."));
            }
        }
        let obj = node.as_object_mut().expect("checked above");
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        node = obj.entry(key.clone()).or_insert(Value::Null);
    }
    Ok(())
}

fn located(path: &Path, e: &serde_json::Error) -> anyhow::Error {
    anyhow!("{}:{}:{}: {e}", path.display(), e.line(), e.column())
}

/// Reads the config at `path` (defaults when `None`) and applies the
/// overrides in order. The result is validated.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<MissionConfig> {
    let overrides = overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    let (mut value, text) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            let value: Value = serde_json::from_str(&text).map_err(|e| located(p, &e))?;
            (value, Some(text))
        }
        None => (Value::Object(Map::new()), None),
    };
    let config: MissionConfig = if overrides.is_empty() {
        match (path, text) {
            (Some(p), Some(text)) => serde_json::from_str(&text).map_err(|e| located(p, &e))?,
            _ => MissionConfig::default(),
        }
    } else {
        for (key, v) in overrides {
            apply_override(&mut value, &key, v)?;
        }
        serde_json::from_value(value).map_err(|e| anyhow!("config after overrides: {e}"))?
    };
    config.validate().map_err(|e| match path {
        Some(p) => anyhow!("{}: {e}", p.display()),
        None => anyhow!("config: {e}"),
    })?;
    Ok(config)
}
