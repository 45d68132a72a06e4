//! Plain-text `key = value` files.
//!
//! Blank lines and lines starting with `#` are ignored. A `[name]` line opens
//! a section; keys before the first section belong to the unnamed section.
//! Dashes in keys are read as underscores.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValueFile {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl KeyValueFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut file = KeyValueFile::default();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_owned();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::usage(format!("{origin}:{}: expected `key = value`", no + 1)));
            };
            let key = normalize_key(key);
            if key.is_empty() {
                return Err(CliError::usage(format!("{origin}:{}: empty key", no + 1)));
            }
            let entries = file.sections.entry(section.clone()).or_default();
            if entries.insert(key.clone(), value.trim().to_owned()).is_some() {
                return Err(CliError::usage(format!("{origin}:{}: duplicate key `{key}`", no + 1)));
            }
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn section(&self, name: &str) -> Option<&BTreeMap<String, String>> {
        self.sections.get(name)
    }

    /// Settings for `command`: the unnamed section overlaid by `[command]`.
    pub fn for_command(&self, command: &str) -> BTreeMap<String, String> {
        let mut out = self.section("").cloned().unwrap_or_default();
        if let Some(s) = self.section(command) {
            out.extend(s.clone());
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            if !name.is_empty() {
                out.push_str(&format!("\n[{name}]\n"));
            }
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}

pub fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Resolved parameters of one command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    values: BTreeMap<String, String>,
}

impl Params {
    /// Merges layers in increasing precedence: defaults, file, flags. Only
    /// keys in `known` are kept, so one file can serve several commands.
    pub fn resolve(
        known: &[(&str, Option<&str>)],
        file: &BTreeMap<String, String>,
        flags: &BTreeMap<String, String>,
    ) -> Self {
        let mut values = BTreeMap::new();
        for &(key, default) in known {
            let v = flags
                .get(key)
                .or_else(|| file.get(key))
                .cloned()
                .or_else(|| default.map(str::to_owned));
            if let Some(v) = v {
                values.insert(key.to_owned(), v);
            }
        }
        Params { values }
    }

    pub fn from_map(values: BTreeMap<String, String>) -> Self {
        Params { values }
    }

    pub fn map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_owned(), value.into());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn required(&self, key: &str) -> Result<&str, CliError> {
        self.raw(key)
            .ok_or_else(|| CliError::usage(format!("missing required setting `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        parse_value(key, self.required(key)?)
    }

    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.raw(key) {
            None | Some("auto") | Some("none") => Ok(None),
            Some(v) => parse_value(key, v).map(Some),
        }
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        self.required(key)?
            .split(',')
            .map(|s| parse_value(key, s.trim()))
            .collect()
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::usage(format!("invalid value `{v}` for `{key}`")))
}
