use serde::{Deserialize, Serialize};

use crate::tags::ControlTags;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TagKind {
    Open,
    Close,
}

/// A complete offload tag found in the stream; `offset` is the character
/// position of the tag's first character, counted from the start of the
/// stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagEvent {
    pub kind: TagKind,
    pub offset: usize,
}

/// Incremental scanner state. `carry` holds the longest unconsumed suffix
/// that is still a proper prefix of an offload tag.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScannerState {
    carry: String,
    absolute_offset: usize,
}

impl ScannerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn carry(&self) -> &str {
        &self.carry
    }

    /// Characters fed so far, including the carry.
    pub fn absolute_offset(&self) -> usize {
        self.absolute_offset
    }

    pub fn feed(&mut self, chunk: &str, tags: &ControlTags) -> Vec<TagEvent> {
        let (next, events) = scan_chunk(std::mem::take(self), chunk, tags);
        *self = next;
        events
    }
}

/// Reports every complete offload tag in `carry + chunk` exactly once.
///
/// Matching is leftmost and non-overlapping, which makes the event list
/// independent of how the stream is split into chunks.
pub fn scan_chunk(
    state: ScannerState,
    chunk: &str,
    tags: &ControlTags,
) -> (ScannerState, Vec<TagEvent>) {
    let carry_chars = state.carry.chars().count();
    let chunk_chars = chunk.chars().count();
    let base = state.absolute_offset - carry_chars;
    let mut buffer = state.carry;
    buffer.push_str(chunk);

    let open = tags.open_tag.as_str();
    let close = tags.close_tag.as_str();
    let mut events = Vec::new();
    let mut pos = 0usize;
    let mut pos_chars = 0usize;
    loop {
        let rest = &buffer[pos..];
        let next = match (rest.find(open), rest.find(close)) {
            (Some(o), Some(c)) if c < o => Some((c, TagKind::Close, close)),
            (Some(o), _) => Some((o, TagKind::Open, open)),
            (None, Some(c)) => Some((c, TagKind::Close, close)),
            (None, None) => None,
        };
        let Some((idx, kind, tag)) = next else { break };
        let at = pos_chars + rest[..idx].chars().count();
        events.push(TagEvent {
            kind,
            offset: base + at,
        });
        pos += idx + tag.len();
        pos_chars = at + tag.chars().count();
    }

    let tail = &buffer[pos..];
    let keep = longest_partial_suffix(tail, &[open, close]);
    let carry = tail[tail.len() - keep..].to_string();
    (
        ScannerState {
            carry,
            absolute_offset: state.absolute_offset + chunk_chars,
        },
        events,
    )
}

/// Byte length of the longest suffix of `tail` that is a proper prefix of
/// one of `tags`.
fn longest_partial_suffix(tail: &str, tags: &[&str]) -> usize {
    let mut best = 0;
    for (i, _) in tail.char_indices() {
        let suffix = &tail[i..];
        if tags
            .iter()
            .any(|t| t.len() > suffix.len() && t.starts_with(suffix))
        {
            best = suffix.len();
            break;
        }
    }
    best
}

/// Scans a complete text in one call.
pub fn scan_text(text: &str, tags: &ControlTags) -> Vec<TagEvent> {
    scan_chunk(ScannerState::new(), text, tags).1
}
