//! JSON experiment configs with dotted-path overrides.

use std::fs;
use std::path::Path;

use dabdetr_core::toy::ExperimentConfig;
use serde_json::Value;

use crate::error::CliError;

/// Loads `path` (or the defaults) and applies `--dotted.key value` overrides.
pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig, CliError> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            let user: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", p.display())))?;
            let mut base = defaults();
            merge(&mut base, user, "").map_err(CliError::Config)?;
            base
        }
        None => defaults(),
    };
    for (k, v) in overrides {
        set_path(&mut value, k, v)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| CliError::Config(format!("{e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn defaults() -> Value {
    serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize")
}

/// Overlays `user` onto `base`, rejecting keys the schema does not have.
fn merge(base: &mut Value, user: Value, prefix: &str) -> Result<(), String> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(format!("unknown key `{key}`")),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Sets the dotted `key`; the raw text is parsed as JSON when possible, else taken as a string.
pub fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
    }
    if cur.is_object() {
        return Err(CliError::Config(format!("key `{key}` is a section, not a value")));
    }
    *cur = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Dotted path of the first leaf where `a` and `b` differ.
pub fn first_difference(a: &Value, b: &Value, prefix: &str) -> Option<String> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => first_difference(u, v, &p),
                    _ => Some(p),
                }
            })
        }
        _ if a == b => None,
        _ => Some(prefix.to_string()),
    }
}

/// Splits trailing `--key value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            return Err(CliError::Usage(format!("unexpected argument `{flag}`")));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let v = it
            .next()
            .ok_or_else(|| CliError::Usage(format!("override `{flag}` needs a value")))?;
        out.push((key.to_string(), v.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let o = parse_overrides(&["--train.steps".into(), "5".into(), "--model.decoder.temperature=10".into()]).unwrap();
        let cfg = load(None, &o).unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.model.decoder.temperature, 10.0);
        let bad = parse_overrides(&["--train.stepz".into(), "5".into()]).unwrap();
        match load(None, &bad) {
            Err(CliError::Config(m)) => assert!(m.contains("train.stepz")),
            other => panic!("{other:?}"),
        }
        assert!(parse_overrides(&["--x".into()]).is_err());
    }

    #[test]
    fn differences_are_located() {
        let a = serde_json::json!({"m": {"a": 1, "b": 2}});
        let b = serde_json::json!({"m": {"a": 1, "b": 3}});
        assert_eq!(first_difference(&a, &b, ""), Some("m.b".into()));
        assert_eq!(first_difference(&a, &a, ""), None);
    }
}
