//! Layered settings: built-in defaults, then a section of the TOML config
//! file, then command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{usage, CliResult};

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
        match serde_json::to_value(table).map_err(|e| usage(e.to_string()))? {
            Value::Object(root) => Ok(ConfigFile { root }),
            _ => Err(usage("config file must be a table")),
        }
    }

    pub fn section(&self, name: &str) -> Option<&Map<String, Value>> {
        self.root.get(name).and_then(Value::as_object)
    }
}

/// Flags that were actually given, as a JSON object of config keys.
#[derive(Debug, Default)]
pub struct Flags(Map<String, Value>);

impl Flags {
    pub fn set<T: Serialize>(&mut self, key: &str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.insert(key.into(), serde_json::to_value(v).expect("flag serializes"));
        }
        self
    }

    pub fn on(&mut self, key: &str, flag: bool) -> &mut Self {
        if flag {
            self.0.insert(key.into(), Value::Bool(true));
        }
        self
    }
}

/// Overlay `file[section]` and then `flags` on `defaults`. Unknown keys in
/// the file are a usage error.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: T, file: &ConfigFile, section: &str, flags: &Flags) -> CliResult<T> {
    let Value::Object(mut merged) = serde_json::to_value(&defaults).expect("config serializes") else {
        unreachable!("configs are structs")
    };
    if let Some(s) = file.section(section) {
        for (k, v) in s {
            if !merged.contains_key(k) {
                return Err(usage(format!("unknown key `{k}` in config section [{section}]")));
            }
            merged.insert(k.clone(), v.clone());
        }
    }
    for (k, v) in &flags.0 {
        merged.insert(k.clone(), v.clone());
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("config section [{section}]: {e}")))
}
