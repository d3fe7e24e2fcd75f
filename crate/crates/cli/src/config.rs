//! Config files: TOML documents, `--set` overrides, unknown-key detection
//! and the digest of the resolved config.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use toml::Value;

/// A problem with how the program was invoked or configured (exit status 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn read_document(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(Value::Table(table))
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies `dotted.key=value`. Intermediate tables are created as needed;
/// replacing a table with a scalar (or descending into a scalar) is an error.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("override key `{key}` is malformed")));
    }
    let mut node = doc;
    for (i, part) in path.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| usage(format!("override `{key}`: `{}` is not a table", path[..i].join("."))))?;
        if i + 1 == path.len() {
            let value = parse_value(raw.trim());
            if let Some(old) = table.get(*part) {
                if old.is_table() && !value.is_table() {
                    return Err(usage(format!("override `{key}` would replace a table with a value")));
                }
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.entry(part.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
    }
    unreachable!("path is nonempty")
}

/// Keys present in `given` but absent from `resolved`, as dotted paths.
fn unknown_keys(given: &Value, resolved: &Value, prefix: &str, out: &mut BTreeSet<String>) {
    let (Some(g), Some(r)) = (given.as_table(), resolved.as_table()) else {
        if let (Some(ga), Some(ra)) = (given.as_array(), resolved.as_array()) {
            for (i, (gv, rv)) in ga.iter().zip(ra).enumerate() {
                unknown_keys(gv, rv, &format!("{prefix}[{i}]"), out);
            }
        }
        return;
    };
    for (k, v) in g {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            Some(rv) => unknown_keys(v, rv, &path, out),
            None => {
                out.insert(path);
            }
        }
    }
}

/// Deserializes `doc` and rejects it if any key was not consumed.
pub fn resolve<T: DeserializeOwned + Serialize>(doc: &Value, what: &str) -> Result<T> {
    let parsed: T = doc.clone().try_into().map_err(|e: toml::de::Error| usage(format!("invalid {what}: {e}")))?;
    let back = Value::try_from(&parsed).context("re-serializing the resolved config")?;
    let mut unknown = BTreeSet::new();
    unknown_keys(doc, &back, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(usage(format!(
            "unknown {what} keys: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(parsed)
}

/// SHA-256 over the canonical JSON of `value` and a label.
pub fn digest<T: Serialize>(label: &str, value: &T) -> Result<String> {
    let json = serde_json::to_string(value)?;
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update([0]);
    h.update(json.as_bytes());
    Ok(hex::encode(h.finalize()))
}
