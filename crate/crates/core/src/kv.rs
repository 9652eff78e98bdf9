//! Canonical key-value text used for configs, checkpoint headers and
//! manifests.
//!
//! One `key = value` pair per line; `#` starts a comment line; blank lines
//! are ignored. The canonical rendering sorts keys, so two equal maps always
//! produce identical bytes (and therefore identical hashes).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", i + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::config(format!("line {}", i + 1), "empty key"));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::config(k, "duplicate key"));
            }
        }
        Ok(KvMap { entries })
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Entries under `prefix.` with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvMap {
        let p = format!("{prefix}.");
        KvMap {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Parses `key` if present, otherwise returns `default`.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.get(key).ok_or_else(|| Error::config(key, "missing"))?;
        v.parse()
            .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}")))
    }

    /// Fails if any key is outside `known`, so typos do not pass silently.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for k in self.entries.keys() {
            if !known.contains(&k.as_str()) {
                return Err(Error::config(k.clone(), "unknown key"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    /// Hex FNV-1a digest of the canonical text.
    pub fn hash_hex(&self) -> String {
        format!("{:016x}", crate::fnv1a64(self.to_text().as_bytes()))
    }
}

/// Comma-separated list helper.
pub fn split_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_is_sorted_and_round_trips() {
        let m = KvMap::parse("# comment\nb = 2\n\na=1\n").unwrap();
        assert_eq!(m.to_text(), "a = 1\nb = 2\n");
        assert_eq!(KvMap::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn rejects_malformed_and_duplicates() {
        assert!(KvMap::parse("novalue").is_err());
        assert!(KvMap::parse("a = 1\na = 2").is_err());
        assert!(KvMap::parse(" = 2").is_err());
    }

    #[test]
    fn typed_access() {
        let m = KvMap::parse("x = 3\ny = abc").unwrap();
        assert_eq!(m.get_or("x", 0usize).unwrap(), 3);
        assert_eq!(m.get_or("z", 7usize).unwrap(), 7);
        assert!(m.get_or("y", 0usize).is_err());
        assert!(m.require::<f64>("z").is_err());
    }

    #[test]
    fn sections_and_unknown_keys() {
        let m = KvMap::parse("net.d = 4\nnet.alpha = 0.3\ntrain.lr = 1").unwrap();
        let net = m.section("net");
        assert_eq!(net.to_text(), "alpha = 0.3\nd = 4\n");
        assert!(net.check_known(&["d", "alpha"]).is_ok());
        assert!(net.check_known(&["d"]).is_err());
    }
}
