//! Line-oriented `key = value` text used for configs, scene specs and manifests.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are namespaced
//! with dots (`train.lr`, `hf.mask_ratio`). Later assignments of the same key
//! override earlier ones.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    /// 1-based source line, 0 for entries set programmatically.
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    entries: Vec<KvEntry>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse { line: i + 1, msg: format!("expected `key = value`, found `{line}`") });
            };
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Parse { line: i + 1, msg: format!("invalid key `{key}`") });
            }
            out.insert_at(key, v.trim(), i + 1);
        }
        Ok(out)
    }

    fn insert_at(&mut self, key: &str, value: &str, line: usize) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.key == key) {
            e.value = value.to_string();
            e.line = line;
        } else {
            self.entries.push(KvEntry { key: key.to_string(), value: value.to_string(), line });
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.insert_at(key, &value.to_string(), 0);
    }

    pub fn merge(&mut self, other: &KvFile) {
        for e in &other.entries {
            self.insert_at(&e.key, &e.value, e.line);
        }
    }

    pub fn entries(&self) -> &[KvEntry] {
        &self.entries
    }

    pub fn entry(&self, key: &str) -> Option<&KvEntry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entry(key).map(|e| e.value.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Parse { line: 0, msg: format!("missing key `{key}`") })
    }

    /// Parses the value of `key` if present, reporting the source line on failure.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|_| Error::Parse { line: e.line, msg: format!("cannot parse `{}` for key `{key}`", e.value) }),
        }
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    /// Comma-separated list value.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(e) = self.entry(key) else { return Ok(None) };
        if e.value.is_empty() {
            return Ok(Some(Vec::new()));
        }
        e.value
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Parse { line: e.line, msg: format!("cannot parse list item `{}` for key `{key}`", s.trim()) })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Distinct second path components of keys starting with `prefix.`, in first-seen order.
    pub fn sections(&self, prefix: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let p = format!("{prefix}.");
        for e in &self.entries {
            if let Some(rest) = e.key.strip_prefix(&p) {
                let name = rest.split('.').next().unwrap_or(rest).to_string();
                if !out.contains(&name) {
                    out.push(name);
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{} = {}", e.key, e.value);
        }
        s
    }
}

pub fn join_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
