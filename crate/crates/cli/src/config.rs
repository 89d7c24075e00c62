//! Flat config files. Keys are the long flag names; a flag given on the command line
//! wins over the same key in the file.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

fn read_table(path: &Path) -> CliResult<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    match serde_json::to_value(table)? {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::internal("config table did not convert to an object")),
    }
}

fn is_unset(v: &Value) -> bool {
    match v {
        Value::Null => true,
        Value::Array(a) => a.is_empty(),
        _ => false,
    }
}

/// Overlays the flags in `cli` on the optional config file and re-reads the result.
pub fn resolve<T: Serialize + DeserializeOwned>(cli: &T, file: Option<&Path>) -> CliResult<T> {
    let mut merged = match file {
        Some(p) => read_table(p)?,
        None => Map::new(),
    };
    if let Value::Object(flags) = serde_json::to_value(cli)? {
        for (k, v) in flags {
            if !is_unset(&v) {
                merged.insert(k, v);
            }
        }
    }
    let origin = file.map_or_else(|| "command line".to_string(), |p| p.display().to_string());
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::usage(format!("{origin}: {e}")))
}

/// The effective settings as JSON, without unset entries.
pub fn effective<T: Serialize>(args: &T) -> CliResult<Value> {
    let mut v = serde_json::to_value(args)?;
    if let Value::Object(m) = &mut v {
        m.retain(|_, v| !is_unset(v));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(rename_all = "kebab-case", deny_unknown_fields)]
    struct Demo {
        iters: Option<usize>,
        seed: Option<u64>,
        rescore_reset: Option<bool>,
        #[serde(default)]
        trace: Vec<String>,
    }

    #[test]
    fn cli_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "iters = 5\nseed = 3\nrescore-reset = true\ntrace = [\"a\"]\n").unwrap();
        let cli = Demo {
            iters: Some(1),
            seed: None,
            rescore_reset: None,
            trace: vec![],
        };
        let got = resolve(&cli, Some(&p)).unwrap();
        assert_eq!(
            got,
            Demo {
                iters: Some(1),
                seed: Some(3),
                rescore_reset: Some(true),
                trace: vec!["a".into()]
            }
        );
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "itters = 5\n").unwrap();
        let cli = Demo {
            iters: None,
            seed: None,
            rescore_reset: None,
            trace: vec![],
        };
        let err = resolve(&cli, Some(&p)).unwrap_err();
        assert_eq!(err.code, crate::error::EXIT_USAGE);
        assert!(err.message.contains("itters"));
    }
}
