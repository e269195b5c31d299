//! Flat JSON config merged under command-line flags.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

#[derive(Debug, Default)]
pub struct Settings {
    values: Map<String, Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        match value {
            Value::Object(map) => Ok(Self {
                values: map.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect(),
            }),
            _ => anyhow::bail!("config {} must be a flat JSON object", path.display()),
        }
    }

    /// The flag value if given, else the config entry `key`, else `None`.
    pub fn opt<T: DeserializeOwned>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .with_context(|| format!("config key `{key}` has the wrong type")),
        }
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        Ok(self.opt(key, flag)?.unwrap_or(default))
    }

    pub fn require<T: DeserializeOwned>(&self, key: &str, flag: Option<T>) -> Result<T> {
        self.opt(key, flag)?
            .with_context(|| format!("missing --{} (or `{key}` in the config file)", key.replace('_', "-")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_config_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"max-epochs": 7, "lr": 0.01}"#).unwrap();
        let s = Settings::load(Some(&p)).unwrap();
        assert_eq!(s.get("max_epochs", None, 30usize).unwrap(), 7);
        assert_eq!(s.get("max_epochs", Some(2usize), 30).unwrap(), 2);
        assert_eq!(s.get("patience", None, 3usize).unwrap(), 3);
        assert!(s.get::<usize>("lr", None, 1).is_err());
        assert!(s.require::<String>("out", None).is_err());
    }
}
