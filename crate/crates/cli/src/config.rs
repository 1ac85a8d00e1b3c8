//! JSON configs with `--set key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

/// Parses `key=value`. The value is read as JSON when it parses, as a
/// plain string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value), String> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got '{s}'"))?;
    if key.is_empty() {
        return Err(format!("empty key in '{s}'"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets a dotted key, creating intermediate objects as needed.
pub fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => {
                return Err(CliError::Config(format!(
                    "cannot set '{key}': '{}' is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}

/// Reads the config (or starts from an empty object), applies overrides and
/// deserializes. Unknown keys are rejected by the target type.
pub fn load<C: DeserializeOwned + Serialize>(
    path: Option<&Path>,
    seed: Option<u64>,
    overrides: &[(String, Value)],
) -> Result<(C, Value), CliError> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for (k, v) in overrides {
        apply_override(&mut root, k, v.clone())?;
    }
    if let Some(seed) = seed {
        apply_override(&mut root, "seed", seed.into())?;
    }
    let cfg: C = serde_json::from_value(root).map_err(|e| CliError::Config(e.to_string()))?;
    let resolved = serde_json::to_value(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((cfg, resolved))
}
