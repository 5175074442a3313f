//! `key = value` configuration files and overrides.
//!
//! Keys are dotted paths into the serialized form of a configuration struct
//! (`meta.inner_lr = 0.05`, `synthetic.n_sources = 2`). Values are read as
//! JSON when they parse as such and as plain strings otherwise; list fields
//! also accept comma-separated items (`seeds = 1, 2, 3`).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_assignments(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_assignments(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_assignments(&text, path)
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got `{s}`")))
}

fn scalar(raw: &str, current: &Value) -> Value {
    if let Value::String(_) = current {
        if let Ok(Value::String(s)) = serde_json::from_str(raw) {
            return Value::String(s);
        }
        return Value::String(raw.to_string());
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn parse_value(raw: &str, current: &Value) -> Value {
    match current {
        Value::Array(items) if !raw.starts_with('[') => {
            let proto = items.first().cloned().unwrap_or(Value::Null);
            Value::Array(
                raw.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| scalar(s, &proto))
                    .collect(),
            )
        }
        _ => scalar(raw, current),
    }
}

fn known_keys(v: &Value) -> String {
    match v {
        Value::Object(m) => m.keys().cloned().collect::<Vec<_>>().join(", "),
        _ => String::new(),
    }
}

/// Applies assignments to `base` and re-validates the result through serde.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, assignments: &[(String, String)]) -> Result<T> {
    let mut root = serde_json::to_value(base)?;
    for (key, raw) in assignments {
        let mut node = &mut root;
        for part in key.split('.') {
            let known = known_keys(node);
            node = match node {
                Value::Object(m) if m.contains_key(part) => m.get_mut(part).unwrap(),
                _ => {
                    return Err(Error::UnknownName {
                        kind: "config key",
                        name: key.clone(),
                        known,
                    })
                }
            };
        }
        *node = parse_value(raw, node);
    }
    serde_json::from_value(root)
        .map_err(|e| Error::InvalidArgument(format!("bad configuration value: {e}")))
}
