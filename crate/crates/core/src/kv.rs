//! `key=value` text files: one pair per line, `#` starts a comment.

use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key=value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("invalid value for `{key}`: `{value}`")]
    Value { key: String, value: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: Vec<(String, String)>,
}

impl KvMap {
    pub fn from_text(text: &str) -> Result<Self, KvError> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| KvError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(KvError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            if entries.iter().any(|(e, _)| e == k) {
                return Err(KvError::Duplicate {
                    line: i + 1,
                    key: k.to_string(),
                });
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KvError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| KvError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_text(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Fails on the first key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), KvError> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(KvError::Unknown(k.to_string())),
            None => Ok(()),
        }
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, KvError> {
        let raw = self
            .get(key)
            .ok_or_else(|| KvError::Missing(key.to_string()))?;
        raw.parse().map_err(|_| KvError::Value {
            key: key.to_string(),
            value: raw.to_string(),
        })
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, KvError> {
        match self.get(key) {
            Some(_) => self.parse(key),
            None => Ok(default),
        }
    }

    /// Comma-separated list.
    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, KvError> {
        let raw = self
            .get(key)
            .ok_or_else(|| KvError::Missing(key.to_string()))?;
        raw.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| KvError::Value {
                    key: key.to_string(),
                    value: raw.to_string(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports() {
        let m = KvMap::from_text("# header\na = 1\nb=2.5 # trailing\n\nc=x,y").unwrap();
        assert_eq!(m.parse::<usize>("a").unwrap(), 1);
        assert_eq!(m.parse::<f64>("b").unwrap(), 2.5);
        assert_eq!(m.parse_list::<String>("c").unwrap(), vec!["x", "y"]);
        assert_eq!(m.parse_or::<usize>("d", 7).unwrap(), 7);
        assert_eq!(m.parse::<usize>("d"), Err(KvError::Missing("d".into())));
        assert!(matches!(m.parse::<usize>("b"), Err(KvError::Value { .. })));
        assert_eq!(m.check_keys(&["a", "b"]), Err(KvError::Unknown("c".into())));
        assert!(matches!(
            KvMap::from_text("a=1\na=2"),
            Err(KvError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(
            KvMap::from_text("oops"),
            Err(KvError::Syntax { line: 1, .. })
        ));
    }
}
