//! Flat `key=value` text configs.
//!
//! One pair per line, `#` starts a comment. Emission order is the caller's,
//! so a config can be written canonically and replayed byte-for-byte.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parse `key=value` lines into a map. Later keys override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got {line:?}",
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Emit pairs in the given order, one `key=value` per line.
pub fn emit_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

/// Fetch and parse a typed value from a config map.
pub fn get_parsed<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::Config(format!("missing key {key:?}")))?;
    raw.parse()
        .map_err(|_| Error::Config(format!("key {key:?}: cannot parse {raw:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_ignores_comments() {
        let map = parse_kv("# header\nfamily = fgsm\nepsilon=0.1\n\n").unwrap();
        assert_eq!(map["family"], "fgsm");
        assert_eq!(map["epsilon"], "0.1");
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_kv("this is not a pair").is_err());
    }

    #[test]
    fn emit_then_parse_round_trips() {
        let text = emit_kv([("a", "1".to_string()), ("b", "x y".to_string())]);
        let map = parse_kv(&text).unwrap();
        assert_eq!(map["a"], "1");
        assert_eq!(map["b"], "x y");
    }
}
