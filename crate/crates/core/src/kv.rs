//! Flat `key=value` text files.
//!
//! One pair per line; blank lines and lines starting with `#` are ignored.
//! Keys keep their file order and may not repeat.

use indexmap::IndexMap;

use crate::error::{Error, Result};

pub type KeyValues = IndexMap<String, String>;

pub fn parse(text: &str) -> Result<KeyValues> {
    let mut out = KeyValues::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
        })?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
    }
    Ok(out)
}

pub fn format(kv: &KeyValues) -> String {
    kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: `{v}` is not a number")))
}

pub fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: `{v}` is not a non-negative integer")))
}

pub fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: `{v}` is not a non-negative integer")))
}

pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: `{v}` is not a boolean"))),
    }
}

/// Comma-separated list; an empty value is an empty list.
pub fn parse_list<T>(key: &str, v: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| item(key, s.trim())).collect()
}

pub fn parse_range(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list(key, v, parse_f64)?.as_slice() {
        &[lo, hi] if lo <= hi => Ok((lo, hi)),
        _ => Err(Error::Config(format!("`{key}`: expected `lo,hi` with lo <= hi, got `{v}`"))),
    }
}

pub fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = parse("# run\n a = 1 \n\nb=x,y\n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "x,y");
        assert_eq!(format(&kv), "a=1\nb=x,y\n");
    }

    #[test]
    fn rejects_duplicates_and_bare_lines() {
        assert!(parse("a=1\na=2").is_err());
        assert!(parse("novalue").is_err());
    }

    #[test]
    fn ranges_must_be_ordered() {
        assert_eq!(parse_range("r", "0.1,0.4").unwrap(), (0.1, 0.4));
        assert!(parse_range("r", "0.4,0.1").is_err());
        assert!(parse_range("r", "0.4").is_err());
    }

    #[test]
    fn floats_round_trip_through_display() {
        let x = 0.1 + 0.2;
        assert_eq!(parse_f64("x", &x.to_string()).unwrap(), x);
    }
}
