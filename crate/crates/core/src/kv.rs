//! Plain-text `key = value` configuration format.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may not repeat.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type KvMap = BTreeMap<String, String>;

pub fn parse(text: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", no + 1)));
        }
    }
    Ok(map)
}

pub fn format(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Removes `key` and parses it, if present.
pub fn take<T: FromStr>(map: &mut KvMap, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match map.remove(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("`{key} = {v}`: {e}"))),
    }
}

/// Comma-separated list of unsigned integers.
pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{s}` is not a comma-separated list of integers")))
        })
        .collect()
}

pub fn join_usize_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Errors if any key remains unconsumed.
pub fn reject_unknown(map: &KvMap) -> Result<()> {
    match map.keys().next() {
        None => Ok(()),
        Some(_) => {
            let keys: Vec<&str> = map.keys().map(String::as_str).collect();
            Err(Error::Config(format!("unknown key(s): {}", keys.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_duplicates() {
        let m = parse("# c\n a = 1 \n\nb=x,y\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x,y");
        assert!(parse("a = 1\na = 2").is_err());
        assert!(parse("novalue").is_err());
    }

    #[test]
    fn take_and_unknown_keys() {
        let mut m = parse("n = 3\nextra = 1").unwrap();
        assert_eq!(take::<usize>(&mut m, "n").unwrap(), Some(3));
        assert_eq!(take::<usize>(&mut m, "n").unwrap(), None);
        assert!(reject_unknown(&m).is_err());
        let mut bad = parse("n = x").unwrap();
        assert!(take::<usize>(&mut bad, "n").is_err());
    }

    #[test]
    fn list_round_trip() {
        assert_eq!(parse_usize_list("16, 32,64").unwrap(), vec![16, 32, 64]);
        assert_eq!(join_usize_list(&[1, 2]), "1,2");
        assert!(parse_usize_list("1,,2").is_err());
    }
}
