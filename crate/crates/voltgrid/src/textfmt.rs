//! Line-oriented sectioned text shared by the network, scenario, controller
//! and model-cache formats.
//!
//! A document is a sequence of `[section]` headers, each followed by data
//! rows. `#` starts a comment, blank lines are ignored. Rows are either
//! whitespace-separated fields or `key = value` pairs; sections choose one
//! style and the consumer enforces it. All errors carry the 1-based source
//! line so file problems point at the offending row.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone)]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.msg)
    }
}

impl std::error::Error for ParseError {}

pub fn err(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError { line, msg: msg.into() }
}

#[derive(Debug, Clone)]
pub struct Row {
    pub line: usize,
    pub fields: Vec<String>,
    pub raw: String,
}

impl Row {
    /// Field `idx` parsed as `T`; `what` names the column in errors.
    pub fn field<T: FromStr>(&self, idx: usize, what: &str) -> Result<T, ParseError> {
        let s = self
            .fields
            .get(idx)
            .ok_or_else(|| err(self.line, format!("missing field {} ({what})", idx + 1)))?;
        s.parse()
            .map_err(|_| err(self.line, format!("bad {what} value {s:?}")))
    }

    pub fn expect_len(&self, n: usize) -> Result<(), ParseError> {
        if self.fields.len() == n {
            Ok(())
        } else {
            Err(err(
                self.line,
                format!("expected {n} fields, found {}", self.fields.len()),
            ))
        }
    }

    /// Splits a `key = value` row; the value keeps internal whitespace.
    pub fn keyval(&self) -> Result<(String, String), ParseError> {
        let (k, v) = self
            .raw
            .split_once('=')
            .ok_or_else(|| err(self.line, "expected `key = value`"))?;
        Ok((k.trim().to_string(), v.trim().to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct Section {
    pub name: String,
    pub rows: Vec<Row>,
}

impl Section {
    /// Interprets every row as `key = value`; duplicate keys are an error.
    pub fn as_map(&self) -> Result<BTreeMap<String, (String, usize)>, ParseError> {
        let mut map = BTreeMap::new();
        for row in &self.rows {
            let (k, v) = row.keyval()?;
            if map.insert(k.clone(), (v, row.line)).is_some() {
                return Err(err(row.line, format!("duplicate key {k:?}")));
            }
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Doc {
    pub sections: Vec<Section>,
}

impl Doc {
    pub fn parse(text: &str) -> Result<Doc, ParseError> {
        let mut doc = Doc::default();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let content = match raw_line.split_once('#') {
                Some((before, _)) => before,
                None => raw_line,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(line, "unterminated section header"))?
                    .trim();
                if name.is_empty() {
                    return Err(err(line, "empty section name"));
                }
                doc.sections.push(Section {
                    name: name.to_string(),
                    rows: Vec::new(),
                });
            } else {
                let section = doc
                    .sections
                    .last_mut()
                    .ok_or_else(|| err(line, "data before first [section]"))?;
                section.rows.push(Row {
                    line,
                    fields: content.split_whitespace().map(str::to_string).collect(),
                    raw: content.to_string(),
                });
            }
        }
        Ok(doc)
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Section, ParseError> {
        self.section(name)
            .ok_or_else(|| err(0, format!("missing [{name}] section")))
    }
}

/// Shortest decimal rendering that reparses to the identical f64. Used by
/// every writer whose output must round-trip bit-exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn parse_f64(s: &str, line: usize, what: &str) -> Result<f64, ParseError> {
    s.parse()
        .map_err(|_| err(line, format!("bad {what} value {s:?}")))
}
