//! Flag files: every key names a long flag of the chosen subcommand.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::Value;

pub fn read_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {} as JSON", path.display()))
    } else {
        let v: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {} as TOML", path.display()))?;
        serde_json::to_value(v).context("converting TOML")
    }
}

fn scalar(key: &str, v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        _ => bail!("config key '{key}' must be a scalar or a list of scalars"),
    })
}

/// Position of the `--config` flag's value in `argv`, if any.
pub fn find_config(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}

fn flag_given(argv: &[OsString], flag: &str) -> bool {
    argv.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.starts_with(&format!("{flag}="))
    })
}

/// Append `--key value` for every config entry whose flag is not already on
/// the command line. Lists become comma-separated values and `true` booleans
/// bare switches.
pub fn merge(argv: Vec<OsString>, table: &Value) -> Result<Vec<OsString>> {
    let Value::Object(map) = table else {
        bail!("config file must hold a table of flag values");
    };
    let mut out = argv.clone();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag_given(&argv, &flag) {
            continue;
        }
        match v {
            Value::Bool(true) => out.push(flag.into()),
            Value::Bool(false) => {}
            Value::Array(items) => {
                let parts = items.iter().map(|x| scalar(key, x)).collect::<Result<Vec<_>>>()?;
                out.push(flag.into());
                out.push(parts.join(",").into());
            }
            other => {
                out.push(flag.into());
                out.push(scalar(key, other)?.into());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn explicit_flags_win() {
        let table = serde_json::json!({"d": 10, "s": 3, "beta": [1.0, 2.0, 3.0], "replacement": true});
        let out = merge(os(&["mf", "risk", "--d", "8"]), &table).unwrap();
        let joined: Vec<String> = out.iter().map(|s| s.to_string_lossy().into_owned()).collect();
        assert_eq!(joined.iter().filter(|a| *a == "--d").count(), 1);
        assert!(joined.windows(2).any(|w| w[0] == "--beta" && w[1] == "1.0,2.0,3.0"));
        assert!(joined.contains(&"--replacement".to_string()));
    }

    #[test]
    fn finds_config_path() {
        assert_eq!(find_config(&os(&["mf", "env", "--config", "a.toml"])), Some("a.toml".into()));
        assert_eq!(find_config(&os(&["mf", "--config=b.json", "env"])), Some("b.json".into()));
        assert_eq!(find_config(&os(&["mf", "env"])), None);
    }
}
