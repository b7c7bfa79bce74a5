//! Configurable crossbar between sensing lines and ADC input channels.
//!
//! The board's microcontroller loads the mapping from a text config of
//! `line <i> -> channel <j>` statements before a run; the mapping is then
//! fixed. It must be injective: two lines can never drive one channel.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CrossbarError {
    #[error("line {line_no}: syntax error: expected `line <i> -> channel <j>`, got {text:?}")]
    Syntax { line_no: usize, text: String },
    #[error("line {line_no}: sensing line {line} assigned twice")]
    DuplicateLine { line_no: usize, line: u32 },
    #[error("channel {channel} claimed by both line {first} and line {second}")]
    Conflict {
        channel: u32,
        first: u32,
        second: u32,
    },
    #[error("line {line_no}: {what} index {index} out of range (limit {limit})")]
    OutOfRange {
        line_no: usize,
        what: &'static str,
        index: u32,
        limit: u32,
    },
    #[error("sensing line {0} is not routed")]
    Unmapped(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossbarMap {
    entries: BTreeMap<u32, u32>,
    line_count: u32,
    channel_count: u32,
}

impl CrossbarMap {
    pub fn empty(line_count: u32, channel_count: u32) -> CrossbarMap {
        CrossbarMap {
            entries: BTreeMap::new(),
            line_count,
            channel_count,
        }
    }

    pub fn identity(size: u32) -> CrossbarMap {
        CrossbarMap {
            entries: (0..size).map(|i| (i, i)).collect(),
            line_count: size,
            channel_count: size,
        }
    }

    /// Builds a map from pairs, enforcing range and injectivity.
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (u32, u32)>,
        line_count: u32,
        channel_count: u32,
    ) -> Result<CrossbarMap, CrossbarError> {
        let mut map = CrossbarMap::empty(line_count, channel_count);
        for (i, (line, channel)) in pairs.into_iter().enumerate() {
            map.insert(i + 1, line, channel)?;
        }
        Ok(map)
    }

    fn insert(&mut self, line_no: usize, line: u32, channel: u32) -> Result<(), CrossbarError> {
        if line >= self.line_count {
            return Err(CrossbarError::OutOfRange {
                line_no,
                what: "line",
                index: line,
                limit: self.line_count,
            });
        }
        if channel >= self.channel_count {
            return Err(CrossbarError::OutOfRange {
                line_no,
                what: "channel",
                index: channel,
                limit: self.channel_count,
            });
        }
        if self.entries.contains_key(&line) {
            return Err(CrossbarError::DuplicateLine { line_no, line });
        }
        if let Some(first) = self.line_for_channel(channel) {
            return Err(CrossbarError::Conflict {
                channel,
                first,
                second: line,
            });
        }
        self.entries.insert(line, channel);
        Ok(())
    }

    /// Parses the crossbar config. `#` starts a comment.
    pub fn parse(
        text: &str,
        line_count: u32,
        channel_count: u32,
    ) -> Result<CrossbarMap, CrossbarError> {
        let mut map = CrossbarMap::empty(line_count, channel_count);
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let syntax = || CrossbarError::Syntax {
                line_no,
                text: content.to_owned(),
            };
            let tokens: Vec<&str> = content.split_whitespace().collect();
            let [kw_line, line, arrow, kw_channel, channel] = tokens[..] else {
                return Err(syntax());
            };
            if kw_line != "line" || arrow != "->" || kw_channel != "channel" {
                return Err(syntax());
            }
            let line: u32 = line.parse().map_err(|_| syntax())?;
            let channel: u32 = channel.parse().map_err(|_| syntax())?;
            map.insert(line_no, line, channel)?;
        }
        Ok(map)
    }

    /// Canonical text form, one statement per mapped line in line order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (line, channel) in &self.entries {
            let _ = writeln!(out, "line {line} -> channel {channel}");
        }
        out
    }

    pub fn route(&self, line: u32) -> Result<u32, CrossbarError> {
        self.entries
            .get(&line)
            .copied()
            .ok_or(CrossbarError::Unmapped(line))
    }

    pub fn line_for_channel(&self, channel: u32) -> Option<u32> {
        self.entries
            .iter()
            .find(|(_, c)| **c == channel)
            .map(|(l, _)| *l)
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.entries.iter().map(|(l, c)| (*l, *c))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn line_count(&self) -> u32 {
        self.line_count
    }

    pub fn channel_count(&self) -> u32 {
        self.channel_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_examples() {
        let m = CrossbarMap::parse("line 0 -> channel 3\nline 1 -> channel 0", 16, 16).unwrap();
        assert_eq!(m.entries().collect::<Vec<_>>(), vec![(0, 3), (1, 0)]);

        let err =
            CrossbarMap::parse("line 0 -> channel 1\nline 2 -> channel 1", 16, 16).unwrap_err();
        assert_eq!(
            err,
            CrossbarError::Conflict {
                channel: 1,
                first: 0,
                second: 2
            }
        );

        assert!(CrossbarMap::parse("", 16, 16).unwrap().is_empty());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            CrossbarMap::parse("# header\nline 0 => channel 1", 4, 4),
            Err(CrossbarError::Syntax { line_no: 2, .. })
        ));
        assert!(matches!(
            CrossbarMap::parse("line 4 -> channel 1", 4, 4),
            Err(CrossbarError::OutOfRange { what: "line", .. })
        ));
        assert!(matches!(
            CrossbarMap::parse("line 0 -> channel 9", 4, 4),
            Err(CrossbarError::OutOfRange {
                what: "channel",
                ..
            })
        ));
        assert!(matches!(
            CrossbarMap::parse("line 0 -> channel 1\nline 0 -> channel 2", 4, 4),
            Err(CrossbarError::DuplicateLine {
                line_no: 2,
                line: 0
            })
        ));
        assert!(matches!(
            CrossbarMap::parse("line x -> channel 1", 4, 4),
            Err(CrossbarError::Syntax { .. })
        ));
    }

    #[test]
    fn route_examples() {
        let m = CrossbarMap::parse("line 0 -> channel 3", 16, 16).unwrap();
        assert_eq!(m.route(0), Ok(3));
        assert_eq!(m.route(1), Err(CrossbarError::Unmapped(1)));
        assert_eq!(CrossbarMap::identity(16).route(7), Ok(7));
    }

    #[test]
    fn serialize_examples() {
        let m = CrossbarMap::from_pairs([(1, 0), (0, 3)], 16, 16).unwrap();
        assert_eq!(m.serialize(), "line 0 -> channel 3\nline 1 -> channel 0\n");
        assert_eq!(CrossbarMap::empty(16, 16).serialize(), "");
        let id = CrossbarMap::identity(16).serialize();
        let lines: Vec<&str> = id.lines().collect();
        assert_eq!(lines.len(), 16);
        for (i, l) in lines.iter().enumerate() {
            assert_eq!(*l, format!("line {i} -> channel {i}"));
        }
    }
}
