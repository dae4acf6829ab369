//! Config files (TOML or JSON) merged with `key.path=value` overrides.

use std::path::Path;

use hcvc::harness::{HarnessError, RunConfig};
use serde_json::{Map, Value};

fn config_error(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// Parses a config document; `.json` files are JSON, everything else TOML.
pub fn parse_document(text: &str, path: &Path) -> Result<Value, HarnessError> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    } else {
        let v: toml::Value = toml::from_str(text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        serde_json::to_value(v).map_err(|e| config_error(e.to_string()))
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key present")).unwrap_or(Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Applies `a.b.c=value`, creating intermediate tables as needed.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), HarnessError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(format!("override key `{key}` is malformed")));
    }
    let mut node = doc;
    for p in &parts[..parts.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        node = node.as_object_mut().expect("object").entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    if !node.is_object() {
        return Err(config_error(format!("override `{key}` descends into a non-table value")));
    }
    node.as_object_mut().expect("object").insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads the optional config file, applies overrides in order and deserializes.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, HarnessError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_error(format!("{}: {e}", p.display())))?;
            parse_document(&text, p)?
        }
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| config_error(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
