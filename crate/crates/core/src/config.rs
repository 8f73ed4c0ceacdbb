//! Run configuration files: a flat, hand-editable text format.
//!
//! Grammar, in full:
//!
//! ```text
//! # comment (whole line; inline comments are not a thing)
//! [section]
//! key = value
//! ```
//!
//! Keys before any `[section]` header live in the anonymous section `""`.
//! Whitespace around section names, keys, and values is trimmed; values
//! keep internal spaces verbatim. Duplicate keys within a section are an
//! error (silent last-one-wins has caused enough grief elsewhere).
//! Rendering a parsed file writes sections and keys in sorted order, so
//! parse → render → parse is the identity and rendered files are stable
//! under re-rendering.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed configuration: section → key → value, everything ordered.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse_named(&text, &path.display().to_string())
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_named(text, "<string>")
    }

    fn parse_named(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Config {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(lineno, format!("unclosed section header {line:?}")))?
                    .trim();
                if name.is_empty() {
                    return Err(err(lineno, "empty section name".into()));
                }
                current = name.to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(lineno, format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(err(lineno, "empty key".into()));
            }
            let section = sections.entry(current.clone()).or_default();
            if section.insert(key.to_string(), value.to_string()).is_some() {
                return Err(err(
                    lineno,
                    format!("duplicate key {key:?} in section {current:?}"),
                ));
            }
        }
        Ok(ConfigFile { sections })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_string())?;
        Ok(())
    }

    /// Raw string lookup. Section `""` is the anonymous head section.
    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl fmt::Display) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn sections(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, String>)> {
        self.sections.iter().map(|(name, kv)| (name.as_str(), kv))
    }

    /// Typed lookup; `None` when absent, `Err` when present but unparsable.
    pub fn get_as<T>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.get(section, key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| {
                Error::invalid(
                    "config",
                    format!("[{section}] {key} = {raw:?}: {e}"),
                )
            }),
        }
    }
}

impl fmt::Display for ConfigFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (name, kv) in &self.sections {
            if kv.is_empty() && name.is_empty() {
                continue;
            }
            if !first {
                writeln!(f)?;
            }
            first = false;
            if !name.is_empty() {
                writeln!(f, "[{name}]")?;
            }
            for (key, value) in kv {
                writeln!(f, "{key} = {value}")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# attack settings used in the write-up
top = level

[attack]
iters = 5000
eta = 0.05
reg = orth

[model]
layers = 3072 1 10
";

    #[test]
    fn parses_sections_keys_and_comments() {
        let cfg = ConfigFile::parse(SAMPLE).unwrap();
        assert_eq!(cfg.get("", "top"), Some("level"));
        assert_eq!(cfg.get("attack", "iters"), Some("5000"));
        assert_eq!(cfg.get("attack", "reg"), Some("orth"));
        assert_eq!(cfg.get("model", "layers"), Some("3072 1 10"));
        assert_eq!(cfg.get("attack", "missing"), None);
        assert_eq!(cfg.get("nosuch", "iters"), None);
    }

    #[test]
    fn render_parse_round_trip_is_identity() {
        let cfg = ConfigFile::parse(SAMPLE).unwrap();
        let rendered = cfg.to_string();
        let again = ConfigFile::parse(&rendered).unwrap();
        assert_eq!(cfg, again);
        // Rendered form is a fixed point of render ∘ parse.
        assert_eq!(again.to_string(), rendered);
    }

    #[test]
    fn typed_lookups_parse_or_explain() {
        let cfg = ConfigFile::parse(SAMPLE).unwrap();
        assert_eq!(cfg.get_as::<u64>("attack", "iters").unwrap(), Some(5000));
        assert_eq!(cfg.get_as::<f64>("attack", "eta").unwrap(), Some(0.05));
        assert_eq!(cfg.get_as::<u64>("attack", "absent").unwrap(), None);
        let err = cfg.get_as::<u64>("attack", "reg").unwrap_err();
        assert!(err.to_string().contains("reg"), "{err}");
    }

    #[test]
    fn duplicate_keys_are_rejected_with_the_line() {
        let text = "[a]\nx = 1\nx = 2\n";
        match ConfigFile::parse(text).unwrap_err() {
            Error::Config { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_are_rejected() {
        for bad in ["[unclosed\n", "novalue\n", "[]\n", " = 3\n"] {
            assert!(
                matches!(ConfigFile::parse(bad), Err(Error::Config { .. })),
                "{bad:?} should not parse"
            );
        }
    }

    #[test]
    fn set_then_save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        let mut cfg = ConfigFile::new();
        cfg.set("attack", "seed", 42);
        cfg.set("attack", "eta", 0.05);
        cfg.set("", "kind", "stripes");
        cfg.save(&path).unwrap();
        let back = ConfigFile::load(&path).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn values_keep_internal_whitespace_but_not_padding() {
        let cfg = ConfigFile::parse("k =   a  b \n").unwrap();
        assert_eq!(cfg.get("", "k"), Some("a  b"));
    }
}
