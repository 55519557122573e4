//! Flat `key = value` configuration text with a canonical form. Sorted
//! printing plus a content hash lets a run be named by its exact
//! configuration, and the strict reader rejects keys nothing consumed,
//! so a typo cannot silently fall back to a default.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Kv {
    map: BTreeMap<String, String>,
}

impl Kv {
    pub fn new() -> Kv {
        Kv::default()
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are
    /// allowed; duplicate keys are not.
    pub fn parse(text: &str) -> Result<Kv> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if map.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("duplicate key {k}")));
            }
        }
        Ok(Kv { map })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Applies a `key=value` override string (CLI `--override` form).
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        self.map.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    /// Keys under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> Kv {
        let dotted = format!("{prefix}.");
        let map = self
            .map
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(&dotted).map(|rest| (rest.to_string(), v.clone()))
            })
            .collect();
        Kv { map }
    }

    /// Canonical text: sorted keys, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// Twelve hex characters of the canonical text's SHA-256; names runs
    /// and ties derived artifacts back to their configuration.
    pub fn hash12(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn reader(&self) -> KvReader<'_> {
        KvReader {
            kv: self,
            consumed: BTreeSet::new(),
        }
    }
}

/// Tracks which keys were consumed so [`KvReader::finish`] can reject the
/// rest. Typed getters fall back to defaults only for missing keys, never
/// for malformed values.
pub struct KvReader<'a> {
    kv: &'a Kv,
    consumed: BTreeSet<String>,
}

impl<'a> KvReader<'a> {
    pub fn str_or(&mut self, key: &str, default: &str) -> String {
        self.consumed.insert(key.to_string());
        self.kv.get(key).unwrap_or(default).to_string()
    }

    pub fn opt_str(&mut self, key: &str) -> Option<String> {
        self.consumed.insert(key.to_string());
        self.kv.get(key).map(|s| s.to_string())
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        self.consumed.insert(key.to_string());
        match self.kv.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                Error::Config(format!("key {key}: cannot parse {raw:?}"))
            }),
        }
    }

    pub fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        self.parsed(key, default)
    }

    pub fn u64_or(&mut self, key: &str, default: u64) -> Result<u64> {
        self.parsed(key, default)
    }

    pub fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        self.parsed(key, default)
    }

    pub fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        self.parsed(key, default)
    }

    /// Comma-separated list of integers; empty string means empty list.
    pub fn usize_list_or(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        self.consumed.insert(key.to_string());
        match self.kv.get(key) {
            None => Ok(default.to_vec()),
            Some("") => Ok(Vec::new()),
            Some(raw) => raw
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("key {key}: bad list entry {p:?}")))
                })
                .collect(),
        }
    }

    /// Marks a whole `prefix.` section as consumed and returns it.
    pub fn section(&mut self, prefix: &str) -> Kv {
        let dotted = format!("{prefix}.");
        for k in self.kv.keys() {
            if k.starts_with(&dotted) {
                self.consumed.insert(k.to_string());
            }
        }
        self.kv.section(prefix)
    }

    /// Errors when any key was never consumed, listing the strays.
    pub fn finish(self) -> Result<()> {
        let strays: Vec<&str> = self
            .kv
            .keys()
            .filter(|k| !self.consumed.contains(**&k))
            .collect();
        if strays.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", strays.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print_round_trip_in_canonical_order() {
        let kv = Kv::parse("b = 2\n# comment\na = 1\n\nc.d = x\n").unwrap();
        assert_eq!(kv.to_text(), "a = 1\nb = 2\nc.d = x\n");
        let again = Kv::parse(&kv.to_text()).unwrap();
        assert_eq!(kv, again);
    }

    #[test]
    fn duplicate_keys_and_malformed_lines_are_config_errors() {
        assert!(matches!(Kv::parse("a = 1\na = 2\n"), Err(Error::Config(_))));
        assert!(matches!(Kv::parse("just words\n"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_depends_on_content_not_input_order() {
        let a = Kv::parse("x = 1\ny = 2\n").unwrap();
        let b = Kv::parse("y = 2\nx = 1\n").unwrap();
        assert_eq!(a.hash12(), b.hash12());
        assert_eq!(a.hash12().len(), 12);
        let c = Kv::parse("x = 1\ny = 3\n").unwrap();
        assert_ne!(a.hash12(), c.hash12());
    }

    #[test]
    fn reader_rejects_unconsumed_keys_by_name() {
        let kv = Kv::parse("known = 1\nmystery = 2\n").unwrap();
        let mut r = kv.reader();
        assert_eq!(r.u64_or("known", 0).unwrap(), 1);
        match r.finish() {
            Err(Error::Config(msg)) => assert!(msg.contains("mystery"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_values_error_rather_than_defaulting() {
        let kv = Kv::parse("n = abc\n").unwrap();
        let mut r = kv.reader();
        assert!(r.usize_or("n", 7).is_err());
    }

    #[test]
    fn sections_strip_their_prefix_and_are_marked_consumed() {
        let kv = Kv::parse("train.lr = 0.1\ntrain.epochs = 3\nmodel.width = 8\n").unwrap();
        let mut r = kv.reader();
        let train = r.section("train");
        assert_eq!(train.get("lr"), Some("0.1"));
        assert_eq!(train.get("epochs"), Some("3"));
        let _ = r.section("model");
        r.finish().unwrap();
    }

    #[test]
    fn overrides_replace_existing_values() {
        let mut kv = Kv::parse("a = 1\n").unwrap();
        kv.apply_override("a=5").unwrap();
        kv.apply_override("b = 6").unwrap();
        assert_eq!(kv.get("a"), Some("5"));
        assert_eq!(kv.get("b"), Some("6"));
        assert!(kv.apply_override("nonsense").is_err());
    }
}
