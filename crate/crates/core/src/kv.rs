//! Flat `key = value` text used for config files and checkpoint metadata.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key/value pairs. `#` starts a comment line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap(BTreeMap<String, String>);

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", i + 1)));
            }
            if map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key {k}", i + 1)));
            }
        }
        Ok(Self(map))
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn extend(&mut self, other: &KvMap) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    pub fn render(&self) -> String {
        self.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|s| parse_value(key, s.trim())).collect()
}

pub fn render_list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Settings that can be read from and written to a [`KvMap`].
pub trait KvConfig {
    /// Applies one entry; `Ok(false)` means the key belongs to someone else.
    fn apply(&mut self, key: &str, value: &str) -> Result<bool>;

    fn write(&self, out: &mut KvMap);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let m = KvMap::parse("# train\nsteps = 10\n\nlr=0.5\n").unwrap();
        assert_eq!(m.get("steps"), Some("10"));
        assert_eq!(m.get("lr"), Some("0.5"));
        assert_eq!(KvMap::parse(&m.render()).unwrap(), m);
        assert!(KvMap::parse("a = 1\na = 2").is_err());
        assert!(KvMap::parse("novalue").is_err());
    }

    #[test]
    fn float_text_round_trips() {
        let x = 0.1 + 0.2;
        let mut m = KvMap::new();
        m.set("x", x);
        assert_eq!(parse_value::<f64>("x", m.get("x").unwrap()).unwrap(), x);
        assert_eq!(parse_list::<f64>("l", "1, 2.5,-3").unwrap(), vec![1.0, 2.5, -3.0]);
    }
}
