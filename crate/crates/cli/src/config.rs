//! JSON configs with `--set key=value` overrides.
//!
//! Overrides edit the JSON document before it is deserialized, so a dotted
//! key addresses exactly what a config file would spell out. Values are parsed
//! as JSON and fall back to a plain string (`--set mode=gcrl`).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub fn load<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> CliResult<T> {
    let mut doc = match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| CliError::config("--config", format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::config("--config", format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    from_value(doc)
}

/// Deserializes with the dotted path of the offending field in the error.
pub fn from_value<T: DeserializeOwned>(doc: Value) -> CliResult<T> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        CliError::config(field_path(&path, &message), message)
    })
}

/// serde reports a missing field at the enclosing struct; name the field
/// itself instead.
fn field_path(path: &str, message: &str) -> String {
    let named = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    match (path, named) {
        (".", Some(name)) => name.to_string(),
        (_, Some(name)) => format!("{path}.{name}"),
        _ => path.to_string(),
    }
}

pub fn apply_override(doc: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{assignment}`")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("--set has an empty key segment in `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for segment in key.split('.') {
        node = match node {
            Value::Object(map) => map.entry(segment).or_insert_with(|| Value::Object(Map::new())),
            Value::Array(items) => {
                let i: usize = segment
                    .parse()
                    .map_err(|_| CliError::config(key, format!("`{segment}` does not index an array")))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| CliError::config(key, format!("index {i} out of range for length {len}")))?
            }
            _ => {
                return Err(CliError::config(
                    key,
                    format!("cannot descend into `{segment}` of a scalar"),
                ))
            }
        };
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use serde_json::json;

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        rate: f64,
    }

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Outer {
        name: String,
        inner: Inner,
    }

    #[test]
    fn overrides_create_nested_objects_and_parse_json() {
        let mut doc = json!({});
        apply_override(&mut doc, "inner.rate=0.5").unwrap();
        apply_override(&mut doc, "name=gcrl").unwrap();
        apply_override(&mut doc, "list=[1,2]").unwrap();
        apply_override(&mut doc, "list.1=7").unwrap();
        assert_eq!(doc, json!({ "inner": { "rate": 0.5 }, "name": "gcrl", "list": [1, 7] }));
    }

    #[test]
    fn quoted_values_stay_strings() {
        let mut doc = json!({});
        apply_override(&mut doc, "name=\"12\"").unwrap();
        apply_override(&mut doc, "other=a=b").unwrap();
        assert_eq!(doc, json!({ "name": "12", "other": "a=b" }));
    }

    #[test]
    fn malformed_assignments_are_usage_errors() {
        let mut doc = json!({});
        for bad in ["noequals", "=1", "a..b=1"] {
            assert!(
                matches!(apply_override(&mut doc, bad), Err(CliError::Usage(_))),
                "{bad}"
            );
        }
        let mut doc = json!({ "a": 1 });
        assert!(matches!(
            apply_override(&mut doc, "a.b=1"),
            Err(CliError::Config { .. })
        ));
    }

    #[test]
    fn errors_name_the_field_path() {
        let field = |doc: Value| match from_value::<Outer>(doc) {
            Err(CliError::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(field(json!({ "inner": { "rate": 1.0 } })), "name");
        assert_eq!(field(json!({ "name": "x", "inner": {} })), "inner.rate");
        assert_eq!(field(json!({ "name": "x", "inner": { "rate": "fast" } })), "inner.rate");
        assert_eq!(
            field(json!({ "name": "x", "inner": { "rate": 1.0, "typo": 1 } })),
            "inner.typo"
        );
    }
}
