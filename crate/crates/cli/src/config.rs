//! Layered run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file,
//! `SETVQA_OUT_DIR` (output directory only), `--set key=value` overrides,
//! then explicit flags. Keys are dotted paths into the run struct, e.g.
//! `config.seed` or `setup.hidden_dim`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub const OUT_DIR_ENV: &str = "SETVQA_OUT_DIR";

/// Reads a TOML (`.toml`) or JSON (anything else) config file.
pub fn read_file(path: &Path) -> CliResult<Value> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(setvqa::Error::from)?;
    let value = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml")) {
        toml::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?
    } else {
        serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    };
    if !value.is_object() {
        return Err(CliError::Config(format!("{}: top level must be a table", path.display())));
    }
    Ok(value)
}

/// `key=value`; the value is read as JSON when it parses, else as a string.
pub fn parse_set(arg: &str) -> CliResult<(String, Value)> {
    let (key, raw) = arg.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{arg}`")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("--set has a malformed key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            _ => return Err(CliError::Config(format!("`{}` is not a table", parts[..i].join(".")))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Builder for one resolved run struct.
pub struct Layers {
    value: Value,
    pub source: Option<PathBuf>,
}

impl Layers {
    pub fn new(file: Option<&Path>) -> CliResult<Self> {
        let value = match file {
            Some(p) => read_file(p)?,
            None => Value::Object(Map::new()),
        };
        let mut layers = Self { value, source: file.map(Path::to_path_buf) };
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                layers.set("out_dir", Value::String(dir))?;
            }
        }
        Ok(layers)
    }

    pub fn set(&mut self, key: &str, value: Value) -> CliResult<()> {
        set_path(&mut self.value, key, value)
    }

    pub fn set_all(&mut self, sets: &[String]) -> CliResult<()> {
        for s in sets {
            let (k, v) = parse_set(s)?;
            self.set(&k, v)?;
        }
        Ok(())
    }

    /// Sets `key` only when the flag was given.
    pub fn flag<T: Serialize>(&mut self, key: &str, value: Option<T>) -> CliResult<()> {
        match value {
            Some(v) => self.set(key, serde_json::to_value(v).expect("flag values serialize")),
            None => Ok(()),
        }
    }

    pub fn resolve<T: DeserializeOwned>(self) -> CliResult<T> {
        serde_json::from_value(self.value).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Pretty JSON of the resolved run, loadable again with `--config`.
pub fn to_json<T: Serialize>(run: &T) -> String {
    let mut s = serde_json::to_string_pretty(run).expect("run configs serialize");
    s.push('\n');
    s
}
