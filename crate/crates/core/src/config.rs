//! Flat key-value configuration files.
//!
//! Grammar: one `key = value` per line, `#` starts a comment, values are
//! TOML scalars or arrays (`0.9`, `"four_rings"`, `[128, 128, 128]`,
//! `[[0, 10], [1000, 30]]`). Tables are rejected. Later assignments from
//! `--set key=value` override file values; a bare override value that is not
//! valid TOML is taken as a string.

use std::collections::BTreeSet;
use std::path::Path;

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: Table,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let values: Table = text.parse().map_err(|e: toml::de::Error| {
            Error::config(format!("config syntax: {}", e.message()))
        })?;
        for (k, v) in &values {
            if matches!(v, Value::Table(_)) {
                return Err(Error::config(format!(
                    "`{k}`: nested tables are not allowed"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::config(format!(
                "override `{assignment}` has an empty key"
            )));
        }
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn insert(&mut self, key: &str, value: impl Into<Value>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// The entries whose keys are listed in `keys`.
    pub fn subset(&self, keys: &[&str]) -> Config {
        let values = self
            .values
            .iter()
            .filter(|(k, _)| keys.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Config { values }
    }

    pub fn merge_defaults(&mut self, defaults: &Config) {
        for (k, v) in &defaults.values {
            self.values.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }

    fn type_err(key: &str, want: &str, got: &Value) -> Error {
        Error::config(format!("`{key}` must be {want}, got `{got}`"))
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::Float(v)) => Ok(Some(*v)),
            Some(Value::Integer(v)) => Ok(Some(*v as f64)),
            Some(v) => Err(Self::type_err(key, "a number", v)),
        }
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::Integer(v)) if *v >= 0 => Ok(Some(*v as u64)),
            Some(v) => Err(Self::type_err(key, "a non-negative integer", v)),
        }
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(*b)),
            Some(v) => Err(Self::type_err(key, "true or false", v)),
        }
    }

    pub fn str(&self, key: &str) -> Result<Option<String>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(Self::type_err(key, "a string", v)),
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                    other => Err(Self::type_err(
                        key,
                        "a list of non-negative integers",
                        other,
                    )),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(v) => Err(Self::type_err(key, "a list of non-negative integers", v)),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Float(f) => Ok(*f),
                    Value::Integer(i) => Ok(*i as f64),
                    other => Err(Self::type_err(key, "a list of numbers", other)),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(v) => Err(Self::type_err(key, "a list of numbers", v)),
        }
    }

    /// A list of `[a, b]` integer pairs.
    pub fn pair_list(&self, key: &str) -> Result<Option<Vec<(u64, u64)>>> {
        let bad = |v: &Value| Self::type_err(key, "a list of [integer, integer] pairs", v);
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .map(|item| match item {
                    Value::Array(p) if p.len() == 2 => match (&p[0], &p[1]) {
                        (Value::Integer(a), Value::Integer(b)) if *a >= 0 && *b >= 0 => {
                            Ok((*a as u64, *b as u64))
                        }
                        _ => Err(bad(item)),
                    },
                    _ => Err(bad(item)),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(v) => Err(bad(v)),
        }
    }

    /// Fails on the first key outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        let known: BTreeSet<&str> = known.iter().copied().collect();
        match self.values.keys().find(|k| !known.contains(k.as_str())) {
            Some(k) => Err(Error::config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    /// Canonical text form: sorted keys, one per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// First 12 hex digits of the SHA-256 of [`Config::render`].
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}
