//! Loading the experiment config from TOML with `key.path=value` overrides.

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Parses a single override value: anything TOML accepts as a value (numbers, booleans,
/// arrays, quoted strings, `inf`), otherwise the raw text as a string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_owned())),
        Err(_) => Value::String(raw.to_owned()),
    }
}

/// Sets `path` (dot separated) inside `table`, creating intermediate tables.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key.path=value"))?;
    let keys: Vec<&str> = path.trim().split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty key in override path"));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path, format!("`{k}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Builds a [`TrainConfig`] from optional TOML text plus overrides, then validates it.
/// Unknown keys are rejected so that typos do not silently fall back to defaults.
pub fn resolve_config(text: Option<&str>, overrides: &[String]) -> Result<TrainConfig> {
    let mut table = match text {
        Some(t) => t.parse::<Table>().map_err(|e| Error::config("config", e.to_string()))?,
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: TrainConfig = Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
    let echoed: Table = toml::to_string(&cfg)
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_default();
    if let Some(key) = first_unknown_key(&table, &echoed, "") {
        return Err(Error::config(key, "unknown key"));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn first_unknown_key(given: &Table, known: &Table, prefix: &str) -> Option<String> {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (Value::Table(g), Some(Value::Table(kn))) => {
                if let Some(bad) = first_unknown_key(g, kn, &path) {
                    return Some(bad);
                }
            }
            (_, Some(_)) => {}
            // Optional fields left unset are absent from the echo.
            (_, None) if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            (_, None) => return Some(path),
        }
    }
    None
}

const OPTIONAL_KEYS: [&str; 2] = ["scenario.power.peak", "scenario.env.wait_capacity"];
