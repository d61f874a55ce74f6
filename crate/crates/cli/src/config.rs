//! Plain `key = value` configuration.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment line;
//! blank lines are ignored; keys are `[a-z0-9_./-]+`; values run to the end of
//! the line with surrounding whitespace trimmed. Command-line flags override
//! file values, which override defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Keys written by the tool into manifests; ignored when a manifest is read
/// back as a config file.
const META_KEYS: [&str; 3] = ["command", "version", "config_hash"];
const META_PREFIX: &str = "output.";

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

pub fn parse_config(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config(format!("line {}: expected 'key = value'", no + 1)));
        };
        let k = k.trim();
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || "_./-".contains(c)) {
            return Err(CliError::Config(format!("line {}: bad key '{k}'", no + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    /// Defaults, then `file`, then `overrides`. Keys outside `defaults` are rejected.
    pub fn resolve(
        defaults: &[(&str, &str)],
        file: Option<&Path>,
        overrides: Vec<(&str, Option<String>)>,
    ) -> CliResult<Self> {
        let mut values: BTreeMap<String, String> =
            defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_config(&text)? {
                if META_KEYS.contains(&k.as_str()) || k.starts_with(META_PREFIX) {
                    continue;
                }
                if !values.contains_key(&k) {
                    return Err(CliError::Config(format!("unknown config key '{k}' in {}", path.display())));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in overrides {
            debug_assert!(values.contains_key(k), "flag {k} lacks a default");
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<T> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| CliError::Config(format!("bad value '{raw}' for '{key}'")))
    }

    /// `None` when the value is empty.
    pub fn optional<T: FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn path(&self, key: &str) -> CliResult<PathBuf> {
        match self.raw(key) {
            "" => Err(CliError::Config(format!("'{key}' is required"))),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn flag(&self, key: &str) -> CliResult<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" | "" => Ok(false),
            other => Err(CliError::Config(format!("bad boolean '{other}' for '{key}'"))),
        }
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Canonical `key = value` text of the resolved settings.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self, command: &str) -> String {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(b"\n");
        h.update(self.canonical().as_bytes());
        hex::encode(h.finalize())
    }
}
