//! TOML config files with dotted `key=value` overrides, resolved through JSON
//! so every serde config type in the core crate works unchanged.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Parse `raw` as a TOML literal (number, bool, array, quoted string); bare
/// words fall back to strings so `mode=full` works without quotes.
fn parse_literal(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key just written")).unwrap_or(Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Set `key` (dot-separated) in `root`. The key must already exist so typos
/// fail loudly instead of being ignored.
pub fn set_dotted(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| CliError::Usage(format!("override {key}: {} is not a table", parts[..i].join("."))))?;
        let slot = obj.get_mut(*part).ok_or_else(|| CliError::Usage(format!("override {key}: unknown key {part:?}")))?;
        if i + 1 == parts.len() {
            let mut v = parse_literal(raw);
            // Integers given for float fields are fine; keep the JSON number.
            if slot.is_f64() {
                if let Some(x) = v.as_f64() {
                    v = serde_json::json!(x);
                }
            }
            *slot = v;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split always yields at least one part")
}

/// Defaults, then the TOML file (a partial table is merged over the
/// defaults), then the overrides in order.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[String]) -> Result<T, CliError> {
    let mut v = serde_json::to_value(T::default()).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        merge(&mut v, serde_json::to_value(table).expect("toml converts to json"), "")?;
    }
    for o in overrides {
        let (k, raw) = o.split_once('=').ok_or_else(|| CliError::Usage(format!("override {o:?} is not key=value")))?;
        set_dotted(&mut v, k.trim(), raw.trim())?;
    }
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn merge(base: &mut Value, patch: Value, prefix: &str) -> Result<(), CliError> {
    match patch {
        Value::Object(m) => {
            for (k, pv) in m {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = base.get_mut(&k).ok_or_else(|| CliError::Usage(format!("config: unknown key {path:?}")))?;
                if pv.is_object() {
                    merge(slot, pv, &path)?;
                } else {
                    *slot = pv;
                }
            }
            Ok(())
        }
        other => {
            *base = other;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, serde::Deserialize, Default, Debug, PartialEq)]
    struct Inner {
        lr: f64,
        on: bool,
    }

    #[derive(Serialize, serde::Deserialize, Default, Debug, PartialEq)]
    struct Outer {
        steps: u64,
        name: String,
        inner: Inner,
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let o: Outer = resolve(None, &["steps=12".into(), "inner.lr=3".into(), "inner.on=true".into(), "name=desk".into()]).unwrap();
        assert_eq!(o, Outer { steps: 12, name: "desk".into(), inner: Inner { lr: 3.0, on: true } });
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        assert!(matches!(resolve::<Outer>(None, &["inner.typo=1".into()]), Err(CliError::Usage(_))));
        assert!(matches!(resolve::<Outer>(None, &["steps".into()]), Err(CliError::Usage(_))));
    }

    #[test]
    fn toml_file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "steps = 5\n[inner]\nlr = 0.5\n").unwrap();
        let o: Outer = resolve(Some(&p), &["inner.lr=0.25".into()]).unwrap();
        assert_eq!(o, Outer { steps: 5, name: String::new(), inner: Inner { lr: 0.25, on: false } });
    }
}
