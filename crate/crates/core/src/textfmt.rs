//! Line-oriented `key = value` documents shared by every on-disk artifact
//! (instances, occupancy measures, plans, checkpoints, config files).
//!
//! Reals are written in scientific notation with 17 significant digits so
//! that a write/read cycle reproduces every `f64` bit for bit. Lists are
//! whitespace separated. Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Document {
    entries: Vec<(String, String)>,
}

/// Formats a real with 17 significant digits.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

impl Document {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        assert!(!value.contains('\n'), "values are single-line");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn set_int(&mut self, key: &str, value: u64) {
        self.set(key, value.to_string());
    }

    pub fn set_real(&mut self, key: &str, value: f64) {
        self.set(key, fmt_real(value));
    }

    pub fn set_ints<I: IntoIterator<Item = usize>>(&mut self, key: &str, values: I) {
        let s: Vec<String> = values.into_iter().map(|v| v.to_string()).collect();
        self.set(key, s.join(" "));
    }

    pub fn set_reals<'a, I: IntoIterator<Item = &'a f64>>(&mut self, key: &str, values: I) {
        let mut s = String::new();
        for (i, v) in values.into_iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(&fmt_real(*v));
        }
        self.set(key, s);
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.iter().any(|(k, _)| k == key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Parse(format!("missing key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad value for `{key}`: {raw}")))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)?
            .split_whitespace()
            .map(|tok| {
                tok.parse()
                    .map_err(|_| Error::Parse(format!("bad list entry for `{key}`: {tok}")))
            })
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", lineno + 1)));
            }
            doc.set(key, value.trim());
        }
        Ok(doc)
    }

    pub fn render(&self, header: &str) -> String {
        let mut out = String::new();
        if !header.is_empty() {
            let _ = writeln!(out, "# {header}");
        }
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>, header: &str) -> Result<()> {
        std::fs::write(path, self.render(header))?;
        Ok(())
    }

    /// Checks a `kind` tag so that files of different types are not confused.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        let found: String = self.get("kind")?;
        if found != kind {
            return Err(Error::Parse(format!("expected kind `{kind}`, found `{found}`")));
        }
        Ok(())
    }
}
