//! Flat `key = value` configuration text.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored. Values
//! are raw strings and are parsed by whoever consumes the key.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: key `{key}` appears twice")]
    Duplicate { line: usize, key: String },
    #[error("key `{key}`: cannot parse `{value}`: {message}")]
    Value {
        key: String,
        value: String,
        message: String,
    },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: n + 1,
                    text: raw.to_string(),
                });
            }
            if entries
                .insert(key.to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(ConfigError::Duplicate {
                    line: n + 1,
                    key: key.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> Option<String> {
        self.entries.insert(key.into(), value.to_string())
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn parse_opt<T>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse().map_err(|e: T::Err| ConfigError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                    message: e.to_string(),
                })
            })
            .transpose()
    }

    /// Overwrites `slot` when `key` is present.
    pub fn apply<T>(&self, key: &str, slot: &mut T) -> Result<(), ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        if let Some(v) = self.parse_opt(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Errors on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(ConfigError::UnknownKey(k.to_string())),
            None => Ok(()),
        }
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print() {
        let kv = KeyValues::parse("# comment\nlayers = 3\n\nd_model=256 # trailing\n").unwrap();
        assert_eq!(kv.get("layers"), Some("3"));
        assert_eq!(kv.parse_opt::<usize>("d_model").unwrap(), Some(256));
        assert_eq!(kv.to_string(), "d_model = 256\nlayers = 3\n");
        assert_eq!(KeyValues::parse(&kv.to_string()).unwrap(), kv);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            KeyValues::parse("a = 1\nnonsense\n"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            KeyValues::parse("a = 1\na = 2\n"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        let kv = KeyValues::parse("a = x").unwrap();
        assert!(kv.parse_opt::<usize>("a").is_err());
        assert!(kv.reject_unknown(&["b"]).is_err());
    }
}
