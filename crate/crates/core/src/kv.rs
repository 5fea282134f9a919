//! Plain `key = value` configuration files.
//!
//! One setting per line; blank lines and lines starting with `#` are
//! ignored. Keys may not repeat.

use std::path::Path;

use crate::error::{Error, Result};

/// A parsed entry with its 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_kv(text: &str, name: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: name.to_string(),
            line: i + 1,
            msg,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(err(format!("duplicate key `{key}`")));
        }
        out.push(Entry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path)?;
    parse_kv(&text, &path.display().to_string())
}

pub fn format_kv<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{} = {}\n", k.as_ref(), v.as_ref()))
        .collect()
}
