//! Plain-text `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, keys and values are trimmed.
//! Later entries override earlier ones. This format carries both column
//! mappings and pipeline run configuration.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KeyValError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("line {line}: empty key")]
    EmptyKey { line: usize },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {key}: {message}")]
    BadValue { key: String, message: String },
}

/// Parsed key/value entries with consumption tracking, so callers can reject
/// unknown keys after pulling everything they understand.
#[derive(Debug, Default, Clone)]
pub struct KeyVals {
    entries: BTreeMap<String, String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KeyVals {
    pub fn parse(text: &str) -> Result<Self, KeyValError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(KeyValError::BadLine {
                    line,
                    text: stripped.to_string(),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(KeyValError::EmptyKey { line });
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(KeyVals {
            entries,
            consumed: Default::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, KeyValError> {
        let text = std::fs::read_to_string(path).map_err(|source| KeyValError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key).map(String::as_str);
        if v.is_some() {
            self.consumed.borrow_mut().insert(key.to_string());
        }
        v
    }

    /// Value parsed with `FromStr`, or an error naming the key.
    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, KeyValError> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| KeyValError::BadValue {
                key: key.to_string(),
                message: format!("cannot parse {raw:?}"),
            }),
        }
    }

    /// Keys never read through `get`/`get_parsed`.
    pub fn unconsumed(&self) -> Vec<String> {
        let consumed = self.consumed.borrow();
        self.entries
            .keys()
            .filter(|k| !consumed.contains(*k))
            .cloned()
            .collect()
    }

    /// All entries in key order, for echoing a config into a manifest.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
