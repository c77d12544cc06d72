use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Literal control tags. Tags are matched as plain text, never as special
/// vocabulary entries, so they may arrive split across streamed chunks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlTags {
    pub open_tag: String,
    pub close_tag: String,
    pub think_open: String,
    pub think_close: String,
    pub answer_open: String,
    pub answer_close: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TagError {
    #[error("control tag `{0}` is empty")]
    Empty(&'static str),
    #[error("control tags `{0}` and `{1}` are identical")]
    Duplicate(String, String),
    #[error("offload tag `{inner}` occurs inside `{outer}`")]
    Overlapping { inner: String, outer: String },
}

impl Default for ControlTags {
    fn default() -> Self {
        Self {
            open_tag: "<bigmodel>".into(),
            close_tag: "</bigmodel>".into(),
            think_open: "<think>".into(),
            think_close: "</think>".into(),
            answer_open: "<answer>".into(),
            answer_close: "</answer>".into(),
        }
    }
}

impl ControlTags {
    /// Offload tags with custom literals and the default scaffold tags.
    pub fn with_offload(open: &str, close: &str) -> Result<Self, TagError> {
        let tags = Self {
            open_tag: open.into(),
            close_tag: close.into(),
            ..Self::default()
        };
        tags.validate()?;
        Ok(tags)
    }

    pub fn validate(&self) -> Result<(), TagError> {
        let named = self.named();
        for (name, tag) in &named {
            if tag.is_empty() {
                return Err(TagError::Empty(name));
            }
        }
        for (i, (_, a)) in named.iter().enumerate() {
            for (_, b) in &named[i + 1..] {
                if a == b {
                    return Err(TagError::Duplicate(a.to_string(), b.to_string()));
                }
            }
        }
        if self.close_tag.contains(self.open_tag.as_str()) {
            return Err(TagError::Overlapping {
                inner: self.open_tag.clone(),
                outer: self.close_tag.clone(),
            });
        }
        if self.open_tag.contains(self.close_tag.as_str()) {
            return Err(TagError::Overlapping {
                inner: self.close_tag.clone(),
                outer: self.open_tag.clone(),
            });
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, &str); 6] {
        [
            ("open_tag", &self.open_tag),
            ("close_tag", &self.close_tag),
            ("think_open", &self.think_open),
            ("think_close", &self.think_close),
            ("answer_open", &self.answer_open),
            ("answer_close", &self.answer_close),
        ]
    }

    /// Longest offload tag in characters; the scanner carry is one less.
    pub fn max_offload_tag_chars(&self) -> usize {
        self.open_tag
            .chars()
            .count()
            .max(self.close_tag.chars().count())
    }

    /// The four scaffold tags, in document order.
    pub fn scaffold(&self) -> [&str; 4] {
        [
            &self.think_open,
            &self.think_close,
            &self.answer_open,
            &self.answer_close,
        ]
    }

    /// Removes every offload tag literal, leaving scaffold tags intact.
    ///
    /// Single left-to-right pass with the same leftmost matching as the
    /// scanner, so removing one tag never creates another.
    pub fn strip_offload_tags(&self, text: &str) -> String {
        let (open, close) = (self.open_tag.as_str(), self.close_tag.as_str());
        let mut out = String::with_capacity(text.len());
        let mut rest = text;
        loop {
            let next = match (rest.find(open), rest.find(close)) {
                (Some(o), Some(c)) if c < o => Some((c, close.len())),
                (Some(o), _) => Some((o, open.len())),
                (None, Some(c)) => Some((c, close.len())),
                (None, None) => None,
            };
            let Some((at, len)) = next else { break };
            out.push_str(&rest[..at]);
            rest = &rest[at + len..];
        }
        out.push_str(rest);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ControlTags::default().validate().unwrap();
    }

    #[test]
    fn rejects_nested_literals() {
        let err = ControlTags::with_offload("<b>", "<b>x").unwrap_err();
        assert!(matches!(err, TagError::Overlapping { .. }));
        let err = ControlTags::with_offload("", "</b>").unwrap_err();
        assert_eq!(err, TagError::Empty("open_tag"));
        let err = ControlTags::with_offload("<think>", "</b>").unwrap_err();
        assert!(matches!(err, TagError::Duplicate(..)));
    }

    #[test]
    fn strip_keeps_scaffold() {
        let tags = ControlTags::default();
        assert_eq!(
            tags.strip_offload_tags("<think>a<bigmodel>b</bigmodel></think>"),
            "<think>ab</think>"
        );
        assert_eq!(tags.strip_offload_tags("</big<bigmodel>model>"), "</bigmodel>");
    }
}
