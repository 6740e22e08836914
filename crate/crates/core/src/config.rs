//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may appear at
//! most once.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_kv(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!(
                "line {}: key {key} already set on line {}",
                i + 1,
                prev.line
            )));
        }
        out.push(Entry { line: i + 1, key: key.to_string(), value: value.to_string() });
    }
    Ok(out)
}

pub fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

pub fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| value(key, s.trim())).collect()
}

/// Parses `AxBxC`.
pub fn dims3(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v.split('x').map(|s| value(key, s.trim())).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected three dims like 64x64x16, got {v:?}")))
}

pub fn join<T: ToString>(items: &[T], sep: &str) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_skips_comments() {
        let e = parse_kv("# c\n\na = 1\n b=x y \n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[1].key.as_str(), e[1].value.as_str(), e[1].line), ("b", "x y", 4));
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(matches!(parse_kv("a=1\na=2"), Err(Error::Config(_))));
        assert!(matches!(parse_kv("just text"), Err(Error::Config(_))));
    }

    #[test]
    fn lists_and_dims() {
        assert_eq!(list::<usize>("k", "1, 2,3").unwrap(), vec![1, 2, 3]);
        assert_eq!(dims3("k", "64x64x16").unwrap(), [64, 64, 16]);
        assert!(dims3("k", "64x64").is_err());
    }
}
