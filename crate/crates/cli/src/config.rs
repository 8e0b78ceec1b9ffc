//! Run configuration: `key = value` or JSON files, flag overrides, defaults.

use std::path::Path;

use evax_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub const TOOL_VERSION: &str = concat!("evax ", env!("CARGO_PKG_VERSION"));
pub const RESOLVED_FILE: &str = "config.resolved";

/// Parses a config file. JSON objects are taken as is; anything else is read
/// as `key = value` lines with `#` comments. A `config.resolved` written by
/// an earlier run is unwrapped to its `config` table after checking that it
/// belongs to `command`.
pub fn read_config_file(path: &Path, command: &str) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
    let mut map = if text.trim_start().starts_with('{') {
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err(Error::config("config", "JSON config must be an object")),
            Err(e) => return Err(Error::config("config", format!("{}: {e}", path.display()))),
        }
    } else {
        parse_key_values(&text)?
    };
    if map.contains_key("tool_version") {
        if let Some(Value::String(c)) = map.get("command") {
            if c != command {
                return Err(Error::config("command", format!("{} records a `{c}` run, not `{command}`", path.display())));
            }
        }
        map = match map.remove("config") {
            Some(Value::Object(m)) => m,
            _ => return Err(Error::config("config", "recorded run has no `config` table")),
        };
    }
    Ok(normalize_keys(map))
}

fn parse_key_values(text: &str) -> Result<Map<String, Value>> {
    let mut map = Map::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config("config", format!("line {}: expected `key = value`", i + 1)))?;
        map.insert(k.trim().to_string(), parse_scalar(v.trim()));
    }
    Ok(map)
}

/// A bare value: JSON when it parses (numbers, booleans, quoted strings),
/// otherwise a plain string.
pub fn parse_scalar(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

fn normalize_keys(map: Map<String, Value>) -> Map<String, Value> {
    map.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect()
}

/// Parses `--set key=value` overrides.
pub fn parse_sets(sets: &[String]) -> Result<Map<String, Value>> {
    let mut map = Map::new();
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::config("set", format!("`{s}` is not KEY=VALUE")))?;
        map.insert(k.trim().replace('-', "_"), parse_scalar(v.trim()));
    }
    Ok(map)
}

/// Layers `file` then `flags` over the defaults of `T`. Keys that `T` does
/// not have are rejected, and a value of the wrong type is reported under
/// its own key.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: &Map<String, Value>, flags: &Map<String, Value>) -> Result<T> {
    let Value::Object(defaults) = serde_json::to_value(T::default()).expect("configs serialize to objects") else {
        unreachable!("configs serialize to objects")
    };
    let mut merged = defaults.clone();
    for (k, v) in file.iter().chain(flags) {
        if !defaults.contains_key(k) {
            let mut known: Vec<&str> = defaults.keys().map(String::as_str).collect();
            known.sort_unstable();
            return Err(Error::config(k.clone(), format!("unknown key (known: {})", known.join(", "))));
        }
        let mut probe = defaults.clone();
        probe.insert(k.clone(), coerce(&defaults[k], v));
        if let Err(e) = serde_json::from_value::<T>(Value::Object(probe)) {
            return Err(Error::config(k.clone(), format!("invalid value {v}: {e}")));
        }
        merged.insert(k.clone(), coerce(&defaults[k], v));
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::config("config", e.to_string()))
}

/// Strings are what the defaults hold for paths and enums; a bare number
/// given where a string is expected (say `uncertain = 1`) is passed as text,
/// and enum names are lowercased.
fn coerce(default: &Value, v: &Value) -> Value {
    match (default, v) {
        (Value::String(_) | Value::Null, Value::Number(n)) => Value::String(n.to_string()),
        (Value::String(d), Value::String(s)) if is_enum_name(d) => Value::String(s.to_ascii_lowercase()),
        _ => v.clone(),
    }
}

fn is_enum_name(d: &str) -> bool {
    !d.is_empty() && d.chars().all(|c| c.is_ascii_lowercase()) && !d.contains('/')
}

#[derive(Serialize)]
struct Resolved<'a, T> {
    tool_version: &'a str,
    command: &'a str,
    threads: usize,
    config: &'a T,
}

/// Writes `config.resolved` into `run_dir`. Serialized straight from `T` so
/// that `f32` fields keep their shortest decimal form.
pub fn write_resolved<T: Serialize>(run_dir: &Path, command: &str, threads: usize, config: &T) -> Result<()> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let doc = Resolved {
        tool_version: TOOL_VERSION,
        command,
        threads,
        config,
    };
    let path = run_dir.join(RESOLVED_FILE);
    let text = serde_json::to_string_pretty(&doc).expect("config serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}
