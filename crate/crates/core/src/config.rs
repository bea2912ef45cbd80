//! Plain `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_config_str(text: &str, path: &Path) -> Result<Vec<ConfigEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push(ConfigEntry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn parse_config_file(path: &Path) -> Result<Vec<ConfigEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    parse_config_str(&text, path)
}

/// Parses `value` for `key`, naming both in the error.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("invalid value `{value}` for `{key}`")))
}

/// Something that can be overridden key by key.
pub trait Configurable {
    /// Applies one override; unknown keys are a validation error.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    fn apply_entries(&mut self, entries: &[ConfigEntry], path: &Path) -> Result<()> {
        for e in entries {
            self.set(&e.key, &e.value).map_err(|err| Error::Parse {
                path: path.to_path_buf(),
                line: e.line,
                msg: err.to_string(),
            })?;
        }
        Ok(())
    }

    fn apply_file(&mut self, path: &Path) -> Result<()> {
        let entries = parse_config_file(path)?;
        self.apply_entries(&entries, path)
    }
}
