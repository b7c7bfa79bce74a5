//! Topic names, topic filters and MQTT 3.1.1 matching semantics.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopicError {
    #[error("topic is empty")]
    Empty,
    #[error("topic {0:?} contains a wildcard character")]
    Wildcard(String),
    #[error("filter {0:?}: '#' must be the last segment and occupy it entirely")]
    MisplacedMultiLevel(String),
    #[error("filter {0:?}: '+' must occupy a whole segment")]
    MisplacedSingleLevel(String),
    #[error("topic {0:?} contains U+0000")]
    Nul(String),
    #[error("topic is longer than 65535 bytes")]
    TooLong,
}

/// Checks that `topic` is a valid publish topic name (non-empty, no wildcards).
pub fn validate_topic(topic: &str) -> Result<(), TopicError> {
    if topic.is_empty() {
        return Err(TopicError::Empty);
    }
    if topic.len() > u16::MAX as usize {
        return Err(TopicError::TooLong);
    }
    if topic.contains('\0') {
        return Err(TopicError::Nul(topic.to_owned()));
    }
    if topic.contains(['+', '#']) {
        return Err(TopicError::Wildcard(topic.to_owned()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Segment {
    Literal(String),
    SingleLevel,
    MultiLevel,
}

/// A validated subscription filter.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    raw: String,
    segments: Vec<Segment>,
}

impl TopicFilter {
    pub fn parse(raw: &str) -> Result<TopicFilter, TopicError> {
        if raw.is_empty() {
            return Err(TopicError::Empty);
        }
        if raw.len() > u16::MAX as usize {
            return Err(TopicError::TooLong);
        }
        if raw.contains('\0') {
            return Err(TopicError::Nul(raw.to_owned()));
        }
        let parts: Vec<&str> = raw.split('/').collect();
        let last = parts.len() - 1;
        let mut segments = Vec::with_capacity(parts.len());
        for (i, part) in parts.iter().enumerate() {
            let seg = match *part {
                "#" if i == last => Segment::MultiLevel,
                "+" => Segment::SingleLevel,
                p if p.contains('#') => {
                    return Err(TopicError::MisplacedMultiLevel(raw.to_owned()))
                }
                p if p.contains('+') => {
                    return Err(TopicError::MisplacedSingleLevel(raw.to_owned()))
                }
                p => Segment::Literal(p.to_owned()),
            };
            segments.push(seg);
        }
        Ok(TopicFilter {
            raw: raw.to_owned(),
            segments,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    /// Whether `topic` is selected by this filter.
    ///
    /// `+` matches exactly one segment (possibly empty) and a trailing `#`
    /// matches any remainder, including none. Topics starting with `$` are
    /// never matched by a leading wildcard.
    pub fn matches(&self, topic: &str) -> bool {
        if topic.starts_with('$')
            && matches!(
                self.segments.first(),
                Some(Segment::SingleLevel | Segment::MultiLevel)
            )
        {
            return false;
        }
        let mut levels = topic.split('/');
        for seg in &self.segments {
            match seg {
                Segment::MultiLevel => return true,
                Segment::SingleLevel => {
                    if levels.next().is_none() {
                        return false;
                    }
                }
                Segment::Literal(lit) => match levels.next() {
                    Some(level) if level == lit => {}
                    _ => return false,
                },
            }
        }
        levels.next().is_none()
    }
}

impl fmt::Debug for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TopicFilter({:?})", self.raw)
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl std::str::FromStr for TopicFilter {
    type Err = TopicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicFilter::parse(s)
    }
}

pub fn topic_matches(filter: &TopicFilter, topic: &str) -> bool {
    filter.matches(topic)
}
