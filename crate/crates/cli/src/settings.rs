//! Flat `key = value` configuration. Every key read is recorded with its
//! resolved value so the run can be re-emitted and replayed.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, CliResult};

#[derive(Debug, Default)]
pub struct Settings {
    given: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
    read: RefCell<BTreeSet<String>>,
}

pub fn parse_text(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            split_pair(line).ok_or_else(|| CliError::config(format!("line {}: expected `key = value`", no + 1)))?;
        map.insert(k, v);
    }
    Ok(map)
}

fn split_pair(s: &str) -> Option<(String, String)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k.to_string(), v.trim().to_string()))
}

impl Settings {
    pub fn load(config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> CliResult<Self> {
        let mut given = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|_| CliError::missing(p))?;
                parse_text(&text)?
            }
            None => BTreeMap::new(),
        };
        for o in overrides {
            let (k, v) = split_pair(o).ok_or_else(|| CliError::config(format!("override `{o}` is not key=value")))?;
            given.insert(k, v);
        }
        if let Some(s) = seed {
            given.insert("seed".into(), s.to_string());
        }
        Ok(Self::from_map(given))
    }

    pub fn from_map(given: BTreeMap<String, String>) -> Self {
        Self {
            given,
            ..Self::default()
        }
    }

    fn record(&self, key: &str, value: String) {
        self.read.borrow_mut().insert(key.to_string());
        self.resolved.borrow_mut().insert(key.to_string(), value);
    }

    pub fn has(&self, key: &str) -> bool {
        self.given.contains_key(key)
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        let v = self.given.get(key).cloned().unwrap_or_else(|| default.to_string());
        self.record(key, v.clone());
        v
    }

    pub fn opt_str(&self, key: &str) -> Option<String> {
        self.read.borrow_mut().insert(key.to_string());
        let v = self.given.get(key).cloned()?;
        self.record(key, v.clone());
        Some(v)
    }

    pub fn get<T>(&self, key: &str, default: T) -> CliResult<T>
    where
        T: FromStr + ToString,
    {
        let v = match self.given.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| CliError::config(format!("cannot parse `{key} = {raw}`")))?,
            None => default,
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn list(&self, key: &str, default: &str) -> CliResult<Vec<usize>> {
        let raw = self.str_or(key, default);
        raw.split(',')
            .map(|w| {
                w.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::config(format!("cannot parse `{key} = {raw}`")))
            })
            .collect()
    }

    /// Fails on keys that were given but never read.
    pub fn finish(&self) -> CliResult<BTreeMap<String, String>> {
        let read = self.read.borrow();
        let unknown: Vec<&String> = self.given.keys().filter(|k| !read.contains(*k)).collect();
        if !unknown.is_empty() {
            let names: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
            return Err(CliError::config(format!("unknown keys: {}", names.join(", "))));
        }
        Ok(self.resolved.borrow().clone())
    }
}

pub fn emit(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_round_trip() {
        let dir = std::env::temp_dir().join("flowmap-settings-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("a.cfg");
        std::fs::write(&p, "# comment\ntrain.steps = 5\ntrain.lr=0.01\n").unwrap();
        let s = Settings::load(Some(&p), &["train.steps=7".into()], Some(3)).unwrap();
        assert_eq!(s.get("train.steps", 0usize).unwrap(), 7);
        assert_eq!(s.get("train.lr", 1.0).unwrap(), 0.01);
        assert_eq!(s.get("seed", 0u64).unwrap(), 3);
        assert_eq!(s.get("train.batch", 32usize).unwrap(), 32);
        let out = s.finish().unwrap();
        assert_eq!(parse_text(&emit(&out)).unwrap(), out);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let s = Settings::from_map(BTreeMap::from([("train.stpes".to_string(), "3".to_string())]));
        assert!(matches!(s.finish(), Err(CliError::Config(_))));
    }

    #[test]
    fn malformed_lines_are_config_errors() {
        assert!(parse_text("just words").is_err());
        assert!(parse_text(" = 3").is_err());
    }
}
