//! `key = value` manifests with `#` comments. Unknown keys and comments
//! survive a read/write round-trip.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Line {
    Blank,
    Comment(String),
    Pair { key: String, value: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    lines: Vec<Line>,
}

impl Manifest {
    pub fn new() -> Manifest {
        Manifest::default()
    }

    pub fn parse(text: &str, source: &str) -> Result<Manifest> {
        let mut lines = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = (i + 1) as u64;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                lines.push(Line::Blank);
            } else if let Some(comment) = trimmed.strip_prefix('#') {
                lines.push(Line::Comment(comment.to_string()));
            } else if let Some((key, value)) = trimmed.split_once('=') {
                let key = key.trim().to_string();
                if key.is_empty() {
                    return Err(Error::format(source, lineno, "empty key"));
                }
                if !seen.insert(key.clone()) {
                    return Err(Error::format(source, lineno, format!("duplicate key `{key}`")));
                }
                lines.push(Line::Pair {
                    key,
                    value: value.trim().to_string(),
                });
            } else {
                return Err(Error::format(
                    source,
                    lineno,
                    format!("expected `key = value` or `#`, got `{trimmed}`"),
                ));
            }
        }
        Ok(Manifest { lines })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines.iter().find_map(|l| match l {
            Line::Pair { key: k, value } if k == key => Some(value.as_str()),
            _ => None,
        })
    }

    pub fn require(&self, key: &str, source: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(source, 0, format!("missing required key `{key}`")))
    }

    /// Set or append a key.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        for l in &mut self.lines {
            if let Line::Pair { key: k, value: v } = l {
                if k == key {
                    *v = value;
                    return;
                }
            }
        }
        self.lines.push(Line::Pair {
            key: key.to_string(),
            value,
        });
    }

    pub fn push_comment(&mut self, text: &str) {
        self.lines.push(Line::Comment(format!(" {text}")));
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.lines.iter().filter_map(|l| match l {
            Line::Pair { key, .. } => Some(key.as_str()),
            _ => None,
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            match l {
                Line::Blank => out.push('\n'),
                Line::Comment(c) => {
                    out.push('#');
                    out.push_str(c);
                    out.push('\n');
                }
                Line::Pair { key, value } => {
                    out.push_str(key);
                    out.push_str(" = ");
                    out.push_str(value);
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.render().as_bytes())
    }

    pub fn read_file(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        Manifest::parse(&text, &path.display().to_string())
    }
}
