//! Candidate documents: `key = value` lines, with `#` or `//` comments.
//!
//! Marker lines such as `# EVOLVE-BLOCK-START` are ordinary comments here, so
//! a document reads the same whether or not it is wrapped in evolve regions.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DocError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("key `{0}` given more than once")]
    Duplicate(String),
    #[error("unknown key `{key}` (allowed: {allowed})")]
    UnknownKey { key: String, allowed: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Doc {
    entries: BTreeMap<String, String>,
}

impl Doc {
    pub fn parse(text: &str) -> Result<Self, DocError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("//") {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| DocError::Syntax {
                    line: i + 1,
                    text: line.to_string(),
                })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(DocError::Syntax {
                    line: i + 1,
                    text: line.to_string(),
                });
            }
            let value = value.trim().trim_matches('"').to_string();
            if entries.insert(key.to_string(), value).is_some() {
                return Err(DocError::Duplicate(key.to_string()));
            }
        }
        Ok(Self { entries })
    }

    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<(), DocError> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(key) => Err(DocError::UnknownKey {
                key: key.clone(),
                allowed: allowed.join(", "),
            }),
            None => Ok(()),
        }
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require_str(&self, key: &str) -> Result<&str, DocError> {
        self.str(key).ok_or_else(|| DocError::Missing(key.to_string()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, DocError> {
        self.entries
            .get(key)
            .map(|v| {
                v.parse().map_err(|_| DocError::BadValue {
                    key: key.to_string(),
                    value: v.clone(),
                })
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, DocError> {
        Ok(self.get(key)?.unwrap_or(default))
    }
}
