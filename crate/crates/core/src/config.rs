//! Flat `key=value` configuration files.
//!
//! One assignment per line; blank lines and lines starting with `#` are
//! ignored. Keys must be unique and every key must be consumed by the reader.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {key:?}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("key {key:?}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("reading {path}: {reason}")]
    Read { path: String, reason: String },
}

/// Parsed assignments awaiting typed extraction.
#[derive(Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: n + 1 });
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: n + 1 });
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: n + 1, key });
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Removes and parses `key`, leaving `target` untouched when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<(), ConfigError> {
        if let Some(value) = self.entries.remove(key) {
            *target = value.parse().map_err(|_| ConfigError::Value {
                key: key.to_string(),
                value,
            })?;
        }
        Ok(())
    }

    /// Comma-separated list variant of [`KeyValues::take`].
    pub fn take_list<T: FromStr>(
        &mut self,
        key: &str,
        target: &mut Vec<T>,
    ) -> Result<(), ConfigError> {
        if let Some(value) = self.entries.remove(key) {
            *target = value
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| ConfigError::Value {
                    key: key.to_string(),
                    value,
                })?;
        }
        Ok(())
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_keys().next() {
            Some(key) => Err(ConfigError::UnknownKey(key)),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_consumes() {
        let mut kv = KeyValues::parse("# c\nmargin = 1.5\n\nsizes=1, 2,3\n").unwrap();
        let mut margin = 0.0f64;
        let mut sizes: Vec<usize> = vec![];
        kv.take("margin", &mut margin).unwrap();
        kv.take_list("sizes", &mut sizes).unwrap();
        kv.finish().unwrap();
        assert_eq!(margin, 1.5);
        assert_eq!(sizes, vec![1, 2, 3]);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        let kv = KeyValues::parse("a=1").unwrap();
        assert_eq!(kv.finish(), Err(ConfigError::UnknownKey("a".into())));
        assert!(matches!(
            KeyValues::parse("a=1\na=2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert_eq!(KeyValues::parse("novalue"), Err(ConfigError::Syntax { line: 1 }));
    }

    #[test]
    fn bad_value_names_key() {
        let mut kv = KeyValues::parse("k=abc").unwrap();
        let mut v = 0u32;
        assert!(matches!(kv.take("k", &mut v), Err(ConfigError::Value { .. })));
    }
}
