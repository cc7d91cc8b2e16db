//! Flat `key=value` records used for manifests, metadata and configs.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{AecError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap(BTreeMap<String, String>);

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses whitespace-separated `key=value` tokens from one line.
    pub fn parse_line(line: &str) -> Result<Self> {
        let mut map = Self::new();
        for tok in line.split_whitespace() {
            map.insert_token(tok)?;
        }
        Ok(map)
    }

    /// Parses a file-style record: one or more `key=value` tokens per line,
    /// `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut map = Self::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("");
            for tok in line.split_whitespace() {
                map.insert_token(tok)?;
            }
        }
        Ok(map)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AecError::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn insert_token(&mut self, tok: &str) -> Result<()> {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| AecError::Parse(format!("expected key=value, got {tok:?}")))?;
        if k.is_empty() {
            return Err(AecError::Parse(format!("empty key in {tok:?}")));
        }
        self.0.insert(k.to_string(), v.to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| AecError::Parse(format!("bad value for {key}: {v:?}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| AecError::Parse(format!("missing key {key}")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    /// Entries whose key starts with `prefix`.
    pub fn filtered(&self, prefix: &str) -> KvMap {
        KvMap(
            self.0
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }

    /// One `key=value` per line, sorted by key.
    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
