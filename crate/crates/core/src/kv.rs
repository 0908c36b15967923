//! Flat `key = value` text files (configs, metadata, manifests).

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
/// Duplicate keys are rejected.
pub fn parse(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format(origin, format!("line {}: expected key = value", n + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::format(origin, format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::format(
                origin,
                format!("line {}: duplicate key {k:?}", n + 1),
            ));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

/// Parses one value, naming the key on failure.
pub fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))
}

pub fn render(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let p = Path::new("c.txt");
        let kv = parse("# hi\n\nepochs = 3\n lr_net=0.5 \n", p).unwrap();
        assert_eq!(
            kv,
            vec![
                ("epochs".into(), "3".into()),
                ("lr_net".into(), "0.5".into())
            ]
        );
        assert!(parse("epochs 3", p).is_err());
        assert!(parse("a = 1\na = 2", p).is_err());
        assert!(value::<usize>("epochs", "x").is_err());
    }
}
