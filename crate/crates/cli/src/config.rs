//! Layered settings: defaults, then a JSON file, then command-line flags.
//! Every leaf of the effective settings records which layer set it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File(PathBuf),
    Flag(String),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Default => write!(f, "default"),
            Source::File(p) => write!(f, "file {}", p.display()),
            Source::Flag(name) => write!(f, "flag {name}"),
        }
    }
}

/// Effective settings of one command plus the origin of each value.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: Value,
    /// Keyed by dotted path; only paths overridden above the defaults.
    overrides: BTreeMap<String, Source>,
}

impl RunConfig {
    pub fn from_defaults<T: Serialize + Default>() -> Self {
        Self {
            values: serde_json::to_value(T::default()).expect("defaults serialise"),
            overrides: BTreeMap::new(),
        }
    }

    /// Overlays a JSON object. Keys absent from the defaults are rejected.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let doc: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: invalid JSON: {e}", path.display())))?;
        let Value::Object(map) = doc else {
            return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display())));
        };
        let source = Source::File(path.to_path_buf());
        let mut set = Vec::new();
        overlay(&mut self.values, map, "", &mut set).map_err(|key| CliError::Usage(format!("{}: unknown key `{key}`", path.display())))?;
        for key in set {
            self.record(key, source.clone());
        }
        Ok(())
    }

    /// Sets the value at dotted `key` from command-line `flag`.
    pub fn set_flag(&mut self, key: &str, value: Value, flag: &str) {
        let mut slot = &mut self.values;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .unwrap_or_else(|| panic!("flag {flag} targets unknown key {key}"));
        }
        *slot = value;
        self.record(key.to_string(), Source::Flag(flag.to_string()));
    }

    fn record(&mut self, key: String, source: Source) {
        let prefix = format!("{key}.");
        self.overrides.retain(|k, _| !k.starts_with(&prefix));
        self.overrides.insert(key, source);
    }

    pub fn values(&self) -> &Value {
        &self.values
    }

    /// Origin of the value at dotted `key`: the nearest overridden ancestor.
    pub fn source_of(&self, key: &str) -> Source {
        let mut probe = key;
        loop {
            if let Some(s) = self.overrides.get(probe) {
                return s.clone();
            }
            match probe.rfind('.') {
                Some(i) => probe = &probe[..i],
                None => return Source::Default,
            }
        }
    }

    /// Every leaf as `(dotted key, value, source)`, in key order.
    pub fn provenance(&self) -> Vec<(String, Value, Source)> {
        let mut leaves = Vec::new();
        collect_leaves(&self.values, String::new(), &mut leaves);
        leaves
            .into_iter()
            .map(|(k, v)| {
                let s = self.source_of(&k);
                (k, v, s)
            })
            .collect()
    }

    pub fn settings<T: DeserializeOwned>(&self) -> Result<T, CliError> {
        serde_json::from_value(self.values.clone()).map_err(|e| CliError::Usage(format!("invalid settings: {e}")))
    }

    /// Settings as pretty JSON; feeding this back as a config file reproduces them.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.values).expect("settings serialise") + "\n"
    }

    /// Settings and per-key origins, for embedding in reports.
    pub fn embedded(&self) -> Value {
        let provenance: Map<String, Value> = self
            .provenance()
            .into_iter()
            .map(|(k, _, s)| (k, Value::String(s.to_string())))
            .collect();
        serde_json::json!({ "settings": self.values, "provenance": provenance })
    }
}

fn overlay(target: &mut Value, patch: Map<String, Value>, prefix: &str, set: &mut Vec<String>) -> Result<(), String> {
    for (k, v) in patch {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(slot) = target.get_mut(&k) else {
            return Err(key);
        };
        match (slot.is_object(), v) {
            (true, Value::Object(inner)) => overlay(slot, inner, &key, set)?,
            (_, v) => {
                *slot = v;
                set.push(key);
            }
        }
    }
    Ok(())
}

fn collect_leaves(v: &Value, prefix: String, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, inner) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect_leaves(inner, key, out);
            }
        }
        _ => out.push((prefix, v.clone())),
    }
}
