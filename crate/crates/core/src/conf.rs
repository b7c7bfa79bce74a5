//! Line-oriented `key = value` files with `[section]` headers.
//!
//! Shared by board, cluster and profile descriptions. `#` starts a comment
//! anywhere on a line; blank lines are ignored; keys before the first header
//! belong to the global section.

use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {message}")]
pub struct ConfError {
    pub line: usize,
    pub message: String,
}

impl ConfError {
    pub fn new(line: usize, message: impl Into<String>) -> Self {
        ConfError {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Section {
    /// Header text without brackets; empty for the global section.
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn require(&self, key: &str) -> Result<&Entry, ConfError> {
        self.get(key).ok_or_else(|| {
            ConfError::new(self.line, format!("[{}] is missing key `{key}`", self.name))
        })
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| {
                ConfError::new(
                    e.line,
                    format!("bad value for `{key}`: {:?} ({err})", e.value),
                )
            }),
        }
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    /// Fails on the first key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), ConfError> {
        match self
            .entries
            .iter()
            .find(|e| !allowed.contains(&e.key.as_str()))
        {
            Some(e) => Err(ConfError::new(
                e.line,
                format!("unknown key `{}` in [{}]", e.key, self.name),
            )),
            None => Ok(()),
        }
    }

    /// Splits `prefix.suffix` headers, returning the suffix for matching ones.
    pub fn suffix<'a>(&'a self, prefix: &str) -> Option<&'a str> {
        self.name
            .strip_prefix(prefix)
            .and_then(|rest| rest.strip_prefix('.'))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfDoc {
    pub global: Section,
    pub sections: Vec<Section>,
}

impl ConfDoc {
    pub fn parse(text: &str) -> Result<ConfDoc, ConfError> {
        let mut doc = ConfDoc::default();
        let mut current: Option<Section> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(inner) = content.strip_prefix('[') {
                let name = inner
                    .strip_suffix(']')
                    .ok_or_else(|| ConfError::new(line, "unterminated section header"))?
                    .trim();
                if name.is_empty() {
                    return Err(ConfError::new(line, "empty section name"));
                }
                if doc
                    .sections
                    .iter()
                    .chain(current.iter())
                    .any(|s| s.name == name)
                {
                    return Err(ConfError::new(line, format!("duplicate section [{name}]")));
                }
                if let Some(done) = current.take() {
                    doc.sections.push(done);
                }
                current = Some(Section {
                    name: name.to_owned(),
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                ConfError::new(line, format!("expected `key = value`, got {content:?}"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfError::new(line, "empty key"));
            }
            let section = current.as_mut().unwrap_or(&mut doc.global);
            if section.get(key).is_some() {
                return Err(ConfError::new(line, format!("duplicate key `{key}`")));
            }
            section.entries.push(Entry {
                key: key.to_owned(),
                value: value.trim().to_owned(),
                line,
            });
        }
        if let Some(done) = current {
            doc.sections.push(done);
        }
        Ok(doc)
    }
}

/// Parses a duration with an optional `ns`, `us`, `ms` or `s` suffix into
/// nanoseconds. A bare integer is nanoseconds.
pub fn parse_duration(text: &str) -> Result<u64, String> {
    let t = text.trim();
    let (digits, scale) = [
        ("ns", 1u64),
        ("us", 1_000),
        ("ms", 1_000_000),
        ("s", 1_000_000_000),
    ]
    .iter()
    .find_map(|(suffix, scale)| t.strip_suffix(suffix).map(|d| (d, *scale)))
    .unwrap_or((t, 1));
    let n: u64 = digits.trim().parse().map_err(|_| {
        format!("invalid duration {text:?}: expected an integer with optional ns|us|ms|s suffix")
    })?;
    n.checked_mul(scale)
        .ok_or_else(|| format!("duration {text:?} overflows"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations() {
        assert_eq!(parse_duration("1s"), Ok(1_000_000_000));
        assert_eq!(parse_duration("20ms"), Ok(20_000_000));
        assert_eq!(parse_duration("128us"), Ok(128_000));
        assert_eq!(parse_duration("7ns"), Ok(7));
        assert_eq!(parse_duration("42"), Ok(42));
        assert!(parse_duration("1.5s").is_err());
        assert!(parse_duration("ms").is_err());
        assert!(parse_duration("-1").is_err());
        assert!(parse_duration("99999999999999999999s").is_err());
    }

    #[test]
    fn sections_and_globals() {
        let doc =
            ConfDoc::parse("seed = 4 # trailing\n\n[node.a]\nk = 1\n[node.b]\nk=2\n").unwrap();
        assert_eq!(doc.global.get("seed").unwrap().value, "4");
        assert_eq!(doc.sections.len(), 2);
        assert_eq!(doc.sections[1].suffix("node"), Some("b"));
        assert_eq!(doc.sections[1].parse::<u32>("k").unwrap(), Some(2));
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(ConfDoc::parse("[a]\nnot a pair\n").unwrap_err().line, 2);
        assert_eq!(ConfDoc::parse("[a]\n[a]\n").unwrap_err().line, 2);
        assert_eq!(ConfDoc::parse("[a\n").unwrap_err().line, 1);
        assert_eq!(ConfDoc::parse("[a]\nx=1\nx=2").unwrap_err().line, 3);
    }
}
