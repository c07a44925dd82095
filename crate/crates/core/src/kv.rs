//! Line-oriented `key=value` text shared by profile and config files, plus
//! small file helpers used by every on-disk format.
//!
//! ```text
//! pascal-profile-v1
//! # comments and blank lines are ignored
//! decode_base=0.03
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One `key=value` entry with its 1-based source line.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses a versioned key=value document. The first non-blank, non-comment
/// line must equal `version`.
pub fn parse(text: &str, version: &str) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    let mut seen_version = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !seen_version {
            if trimmed != version {
                return Err(Error::parse(
                    line,
                    format!("expected format header `{version}`, found `{trimmed}`"),
                ));
            }
            seen_version = true;
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(Error::parse(
                line,
                format!("expected key=value, found `{trimmed}`"),
            ));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::parse(line, "empty key"));
        }
        if entries.iter().any(|e: &Entry| e.key == key) {
            return Err(Error::parse(line, format!("duplicate key `{key}`")));
        }
        entries.push(Entry {
            line,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    if !seen_version && !text.trim().is_empty() {
        return Err(Error::parse(1, format!("missing format header `{version}`")));
    }
    Ok(entries)
}

impl Entry {
    pub fn parse_f64(&self) -> Result<f64> {
        self.value.parse::<f64>().map_err(|_| {
            Error::parse(
                self.line,
                format!("{}: `{}` is not a number", self.key, self.value),
            )
        })
    }

    pub fn parse_u64(&self) -> Result<u64> {
        self.value.parse::<u64>().map_err(|_| {
            Error::parse(
                self.line,
                format!("{}: `{}` is not a non-negative integer", self.key, self.value),
            )
        })
    }

    pub fn parse_bool(&self) -> Result<bool> {
        parse_bool(&self.value).ok_or_else(|| {
            Error::parse(
                self.line,
                format!("{}: `{}` is not a boolean", self.key, self.value),
            )
        })
    }
}

pub fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

/// Formats seconds with the shortest round-trip representation, padded to at
/// least six fractional digits.
pub fn format_seconds(value: f64) -> String {
    let mut s = format!("{value}");
    if !value.is_finite() {
        return s;
    }
    let decimals = match s.find('.') {
        Some(dot) => s.len() - dot - 1,
        None => {
            s.push('.');
            0
        }
    };
    for _ in decimals..6 {
        s.push('0');
    }
    s
}

/// Writes `contents` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
