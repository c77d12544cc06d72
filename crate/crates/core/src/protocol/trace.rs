use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scanner::{scan_text, TagKind};
use crate::tags::ControlTags;
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanOrigin {
    Annotated,
    Emitted,
    RandomPolicy,
    ForcedTakeback,
}

/// Half-open character interval `[start, end)` of the tag-stripped text
/// that sits inside an offload region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffloadSpan {
    pub start: usize,
    pub end: usize,
    pub origin: SpanOrigin,
    pub token_estimate: u64,
}

impl OffloadSpan {
    pub fn new(start: usize, end: usize, origin: SpanOrigin) -> Self {
        Self {
            start,
            end,
            origin,
            token_estimate: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

/// Checks the span invariants: non-empty, in bounds, sorted, disjoint.
pub fn spans_well_formed(spans: &[OffloadSpan], text_len: usize) -> bool {
    spans.iter().all(|s| s.start < s.end && s.end <= text_len)
        && spans.windows(2).all(|w| w[0].end <= w[1].start)
}

/// The full text of one run (tags included) plus the offload regions,
/// measured over the tag-stripped text.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub text: String,
    pub spans: Vec<OffloadSpan>,
    pub handoff_count: usize,
    pub small_tokens: u64,
    pub large_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoverageCounting {
    #[default]
    WhitespaceWords,
    BackendTokens,
}

impl GenerationTrace {
    pub fn stripped_text(&self, tags: &ControlTags) -> String {
        tags.strip_offload_tags(&self.text)
    }

    /// Fraction of the trace decoded inside offload regions; 0 for an
    /// empty trace.
    pub fn coverage(&self, counting: CoverageCounting, tags: &ControlTags) -> f64 {
        match counting {
            CoverageCounting::WhitespaceWords => {
                let stripped = self.stripped_text(tags);
                let ranges: Vec<_> = self.spans.iter().map(OffloadSpan::range).collect();
                word_fraction(&stripped, &ranges)
            }
            CoverageCounting::BackendTokens => {
                let total = self.small_tokens + self.large_tokens;
                if total == 0 {
                    0.0
                } else {
                    let inside: u64 = self.spans.iter().map(|s| s.token_estimate).sum();
                    (inside as f64 / total as f64).min(1.0)
                }
            }
        }
    }
}

/// Whitespace-word fraction of `text` starting inside `ranges`.
pub fn word_fraction(text: &str, ranges: &[(usize, usize)]) -> f64 {
    let total = text::count_words(text);
    if total == 0 {
        return 0.0;
    }
    text::words_starting_in(text, ranges) as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IllegalReason {
    UnclosedOffload,
    CloseBeforeOpen,
    NestedOffload,
    MissingThink,
    MissingAnswer,
}

impl IllegalReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::UnclosedOffload => "unclosed-offload",
            Self::CloseBeforeOpen => "close-before-open",
            Self::NestedOffload => "nested-offload",
            Self::MissingThink => "missing-think",
            Self::MissingAnswer => "missing-answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceValidation {
    pub scaffold_ok: bool,
    pub tags_balanced: bool,
    pub tags_non_nested: bool,
    pub illegal_reasons: Vec<IllegalReason>,
}

impl TraceValidation {
    pub fn is_legal(&self) -> bool {
        self.illegal_reasons.is_empty()
    }

    /// Balanced and non-nested; the precondition for span extraction.
    pub fn offload_well_formed(&self) -> bool {
        self.tags_balanced && self.tags_non_nested
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("malformed offload tags: {0:?}")]
    Invalid(TraceValidation),
    #[error("spans overlap, are unsorted, or exceed the text")]
    BadSpans,
}

fn single_occurrence(text: &str, tag: &str) -> Option<usize> {
    let mut it = text.match_indices(tag);
    match (it.next(), it.next()) {
        (Some((at, _)), None) => Some(at),
        _ => None,
    }
}

pub fn validate_trace(text: &str, tags: &ControlTags) -> TraceValidation {
    let mut reasons = Vec::new();
    let push = |r: IllegalReason, reasons: &mut Vec<IllegalReason>| {
        if !reasons.contains(&r) {
            reasons.push(r);
        }
    };

    let think = single_occurrence(text, &tags.think_open)
        .zip(single_occurrence(text, &tags.think_close))
        .filter(|(o, c)| o < c);
    let answer = single_occurrence(text, &tags.answer_open)
        .zip(single_occurrence(text, &tags.answer_close))
        .filter(|(o, c)| o < c);
    match (think, answer) {
        (None, a) => {
            push(IllegalReason::MissingThink, &mut reasons);
            if a.is_none() {
                push(IllegalReason::MissingAnswer, &mut reasons);
            }
        }
        (Some(_), None) => push(IllegalReason::MissingAnswer, &mut reasons),
        (Some((_, think_close)), Some((answer_open, _))) => {
            if think_close + tags.think_close.len() > answer_open {
                push(IllegalReason::MissingAnswer, &mut reasons);
            }
        }
    }
    let scaffold_ok = reasons.is_empty();

    let mut depth = 0usize;
    let mut balanced = true;
    let mut non_nested = true;
    for ev in scan_text(text, tags) {
        match ev.kind {
            TagKind::Open => {
                if depth > 0 {
                    non_nested = false;
                    push(IllegalReason::NestedOffload, &mut reasons);
                }
                depth += 1;
            }
            TagKind::Close => {
                if depth == 0 {
                    balanced = false;
                    push(IllegalReason::CloseBeforeOpen, &mut reasons);
                } else {
                    depth -= 1;
                }
            }
        }
    }
    if depth > 0 {
        balanced = false;
        push(IllegalReason::UnclosedOffload, &mut reasons);
    }

    TraceValidation {
        scaffold_ok,
        tags_balanced: balanced,
        tags_non_nested: non_nested,
        illegal_reasons: reasons,
    }
}

/// Spans of a well-formed tagged text, measured over the text with offload
/// tags removed. Empty regions (`<bigmodel></bigmodel>`) produce no span.
pub fn extract_spans(text: &str, tags: &ControlTags) -> Result<Vec<OffloadSpan>, TraceError> {
    extract_spans_as(text, tags, SpanOrigin::Emitted)
}

pub fn extract_spans_as(
    text: &str,
    tags: &ControlTags,
    origin: SpanOrigin,
) -> Result<Vec<OffloadSpan>, TraceError> {
    let validation = validate_trace(text, tags);
    if !validation.offload_well_formed() {
        return Err(TraceError::Invalid(validation));
    }
    let open_len = tags.open_tag.chars().count();
    let close_len = tags.close_tag.chars().count();
    let stripped = tags.strip_offload_tags(text);
    let mut removed = 0usize;
    let mut start = 0usize;
    let mut spans = Vec::new();
    for ev in scan_text(text, tags) {
        let at = ev.offset - removed;
        match ev.kind {
            TagKind::Open => {
                start = at;
                removed += open_len;
            }
            TagKind::Close => {
                removed += close_len;
                if at > start {
                    let mut span = OffloadSpan::new(start, at, origin);
                    span.token_estimate =
                        text::words_starting_in(&stripped, &[(start, at)]) as u64;
                    spans.push(span);
                }
            }
        }
    }
    Ok(spans)
}

/// Inserts offload tags around each span of `stripped`.
pub fn wrap_spans(
    stripped: &str,
    spans: &[OffloadSpan],
    tags: &ControlTags,
) -> Result<String, TraceError> {
    if !spans_well_formed(spans, text::char_len(stripped)) {
        return Err(TraceError::BadSpans);
    }
    let mut out = String::with_capacity(
        stripped.len() + spans.len() * (tags.open_tag.len() + tags.close_tag.len()),
    );
    let bytes: Vec<usize> = stripped
        .char_indices()
        .map(|(b, _)| b)
        .chain([stripped.len()])
        .collect();
    let mut last_byte = 0usize;
    for span in spans {
        let (s, e) = (bytes[span.start], bytes[span.end]);
        out.push_str(&stripped[last_byte..s]);
        out.push_str(&tags.open_tag);
        out.push_str(&stripped[s..e]);
        out.push_str(&tags.close_tag);
        last_byte = e;
    }
    out.push_str(&stripped[last_byte..]);
    Ok(out)
}

/// Offload regions of a possibly malformed text, over the stripped text:
/// stray closes are ignored, nested opens extend the outer region and an
/// unclosed region runs to the end.
pub fn lenient_regions(text: &str, tags: &ControlTags) -> (String, Vec<(usize, usize)>) {
    let open_len = tags.open_tag.chars().count();
    let close_len = tags.close_tag.chars().count();
    let stripped = tags.strip_offload_tags(text);
    let mut removed = 0usize;
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut regions = Vec::new();
    for ev in scan_text(text, tags) {
        let at = ev.offset - removed;
        match ev.kind {
            TagKind::Open => {
                removed += open_len;
                if depth == 0 {
                    start = at;
                }
                depth += 1;
            }
            TagKind::Close => {
                removed += close_len;
                if depth > 0 {
                    depth -= 1;
                    if depth == 0 && at > start {
                        regions.push((start, at));
                    }
                }
            }
        }
    }
    let len = text::char_len(&stripped);
    if depth > 0 && len > start {
        regions.push((start, len));
    }
    (stripped, regions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags() -> ControlTags {
        ControlTags::default()
    }

    #[test]
    fn canonical_trace_is_legal() {
        let v = validate_trace(
            "<think>a<bigmodel>b</bigmodel>c</think><answer>x</answer>",
            &tags(),
        );
        assert!(v.scaffold_ok && v.tags_balanced && v.tags_non_nested);
        assert!(v.illegal_reasons.is_empty());
    }

    #[test]
    fn unclosed_offload() {
        let v = validate_trace("<think>a<bigmodel>b</think><answer>x</answer>", &tags());
        assert!(v.scaffold_ok);
        assert!(!v.tags_balanced);
        assert!(v.tags_non_nested);
        assert_eq!(v.illegal_reasons, vec![IllegalReason::UnclosedOffload]);
    }

    #[test]
    fn nested_offload() {
        let v = validate_trace(
            "<think><bigmodel>a<bigmodel>b</bigmodel></bigmodel>c</think><answer>x</answer>",
            &tags(),
        );
        assert!(v.tags_balanced);
        assert!(!v.tags_non_nested);
        assert_eq!(v.illegal_reasons, vec![IllegalReason::NestedOffload]);
    }

    #[test]
    fn close_before_open_and_missing_scaffold() {
        let v = validate_trace("</bigmodel>x<bigmodel>y</bigmodel>", &tags());
        assert!(!v.scaffold_ok);
        assert!(!v.tags_balanced);
        assert_eq!(
            v.illegal_reasons,
            vec![
                IllegalReason::MissingThink,
                IllegalReason::MissingAnswer,
                IllegalReason::CloseBeforeOpen
            ]
        );
        let v = validate_trace("<answer>x</answer><think>a</think>", &tags());
        assert_eq!(v.illegal_reasons, vec![IllegalReason::MissingAnswer]);
        let v = validate_trace("<think>a</think><think>b</think><answer>x</answer>", &tags());
        assert_eq!(v.illegal_reasons, vec![IllegalReason::MissingThink]);
    }

    #[test]
    fn extract_simple_span() {
        let spans = extract_spans("ab<bigmodel>cde</bigmodel>f", &tags()).unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].range(), (2, 5));
        assert!(extract_spans("plain", &tags()).unwrap().is_empty());
        assert!(matches!(
            extract_spans("a<bigmodel>b", &tags()),
            Err(TraceError::Invalid(_))
        ));
    }

    #[test]
    fn wrap_round_trip() {
        let spans = vec![OffloadSpan::new(2, 5, SpanOrigin::Annotated)];
        let wrapped = wrap_spans("abcdef", &spans, &tags()).unwrap();
        assert_eq!(wrapped, "ab<bigmodel>cde</bigmodel>f");
        assert_eq!(wrap_spans("abcdef", &[], &tags()).unwrap(), "abcdef");
        let bad = vec![
            OffloadSpan::new(1, 4, SpanOrigin::Annotated),
            OffloadSpan::new(3, 5, SpanOrigin::Annotated),
        ];
        assert_eq!(
            wrap_spans("abcdef", &bad, &tags()),
            Err(TraceError::BadSpans)
        );
    }

    #[test]
    fn coverage_by_words() {
        let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        let stripped = words.join(" ");
        // Words 50..90 inside the span.
        let start = words[..50].iter().map(|w| w.len() + 1).sum::<usize>();
        let end = start + words[50..90].iter().map(|w| w.len() + 1).sum::<usize>() - 1;
        let spans = vec![OffloadSpan::new(start, end, SpanOrigin::Emitted)];
        let text = wrap_spans(&stripped, &spans, &tags()).unwrap();
        let trace = GenerationTrace {
            text,
            spans,
            handoff_count: 1,
            small_tokens: 160,
            large_tokens: 40,
        };
        assert!((trace.coverage(CoverageCounting::WhitespaceWords, &tags()) - 0.2).abs() < 1e-12);
        let empty = GenerationTrace::default();
        assert_eq!(empty.coverage(CoverageCounting::WhitespaceWords, &tags()), 0.0);
        assert_eq!(empty.coverage(CoverageCounting::BackendTokens, &tags()), 0.0);
    }

    #[test]
    fn full_coverage() {
        let text = "<bigmodel>all of it</bigmodel>";
        let spans = extract_spans(text, &tags()).unwrap();
        let trace = GenerationTrace {
            text: text.into(),
            spans,
            handoff_count: 1,
            small_tokens: 0,
            large_tokens: 3,
        };
        assert_eq!(trace.coverage(CoverageCounting::WhitespaceWords, &tags()), 1.0);
    }

    #[test]
    fn lenient_regions_tolerate_malformed_tags() {
        let (s, r) = lenient_regions("a </bigmodel>b <bigmodel>c <bigmodel>d</bigmodel> e", &tags());
        assert_eq!(s, "a b c d e");
        assert_eq!(r, vec![(4, 9)]);
    }
}
