//! Training-data construction: locate annotator snippets in a reasoning
//! trace, wrap them in offload tags and summarize the resulting corpus.

mod fuzzy;
mod stats;

pub use fuzzy::{fuzzy_match, FuzzyMatch, MatchConfig, Normalization};
pub use stats::{dataset_stats, Histogram, StatsSummary, StatusCounts, DEFAULT_BINS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, DecodeRequest};
use crate::protocol::{extract_spans_as, word_fraction, wrap_spans, OffloadSpan, SpanOrigin};
use crate::tags::ControlTags;
use crate::text;

pub const TRACE_SLOT: &str = "{trace}";

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("annotator response is not a snippet list ({reason}); raw response: {raw:?}")]
    Format { reason: String, raw: String },
    #[error("prompt template has no {TRACE_SLOT} slot")]
    Template,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl AnnotateError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, AnnotateError::Backend(e) if e.is_retriable())
    }
}

fn default_snippet_open() -> String {
    "<snippet>".into()
}

fn default_snippet_close() -> String {
    "</snippet>".into()
}

fn default_max_tokens() -> u32 {
    2048
}

/// Annotator prompt with a `{trace}` slot and the delimiters it asks the
/// annotator to put around each snippet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
    #[serde(default = "default_snippet_open")]
    pub snippet_open: String,
    #[serde(default = "default_snippet_close")]
    pub snippet_close: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, AnnotateError> {
        let t = Self {
            text: text.into(),
            snippet_open: default_snippet_open(),
            snippet_close: default_snippet_close(),
            max_tokens: default_max_tokens(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), AnnotateError> {
        if !self.text.contains(TRACE_SLOT)
            || self.snippet_open.is_empty()
            || self.snippet_close.is_empty()
        {
            return Err(AnnotateError::Template);
        }
        Ok(())
    }

    pub fn render(&self, trace: &str) -> String {
        self.text.replace(TRACE_SLOT, trace)
    }

    /// Splits an annotator response into snippets. Text outside blocks is
    /// ignored; a blank response is an empty list.
    pub fn parse_response(&self, raw: &str) -> Result<Vec<String>, AnnotateError> {
        let err = |reason: &str| AnnotateError::Format {
            reason: reason.into(),
            raw: raw.to_string(),
        };
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        let mut snippets = Vec::new();
        let mut rest = raw;
        loop {
            let open = rest.find(&self.snippet_open);
            let close = rest.find(&self.snippet_close);
            match (open, close) {
                (None, None) => break,
                (None, Some(_)) => return Err(err("closing delimiter without opening")),
                (Some(o), Some(c)) if c < o => return Err(err("closing delimiter without opening")),
                (Some(_), None) => return Err(err("unclosed snippet")),
                (Some(o), Some(c)) => {
                    let body = &rest[o + self.snippet_open.len()..c];
                    if body.contains(&self.snippet_open) {
                        return Err(err("nested snippet"));
                    }
                    snippets.push(body.trim().to_string());
                    rest = &rest[c + self.snippet_close.len()..];
                }
            }
        }
        if snippets.is_empty() {
            return Err(err("no delimited snippets"));
        }
        Ok(snippets)
    }
}

/// Asks the annotator for the hard spans of `trace`.
pub fn request_snippets(
    trace: &str,
    annotator: &mut dyn Backend,
    template: &PromptTemplate,
) -> Result<Vec<String>, AnnotateError> {
    template.validate()?;
    let at = annotator.committed();
    annotator.prefill(at, &template.render(trace))?;
    let completion = annotator.decode_stream(&DecodeRequest::greedy(template.max_tokens))?;
    template.parse_response(&completion.text())
}

/// Unions overlapping and adjacent spans; the result is sorted and disjoint.
pub fn merge_spans(spans: &[OffloadSpan]) -> Vec<OffloadSpan> {
    let mut sorted: Vec<OffloadSpan> = spans.iter().filter(|s| !s.is_empty()).cloned().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    let mut out: Vec<OffloadSpan> = Vec::with_capacity(sorted.len());
    for s in sorted {
        match out.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => out.push(s),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    NoMatch,
    OverLimit,
    /// The trace already contains offload tag text, so wrapping cannot
    /// round-trip.
    TagCollision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RecordStatus {
    Ok,
    Partial { unmatched: usize, dropped: usize },
    Rejected { reason: RejectReason },
}

impl RecordStatus {
    pub fn is_usable(&self) -> bool {
        !matches!(self, RecordStatus::Rejected { .. })
    }
}

/// Where one snippet landed, if anywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetMatch {
    pub snippet: usize,
    pub found: Option<FuzzyMatch>,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub question: String,
    pub trace: String,
    pub snippets: Vec<String>,
    pub snippet_matches: Vec<SnippetMatch>,
    pub matched_spans: Vec<OffloadSpan>,
    pub annotated_text: String,
    pub offload_fraction: f64,
    pub status: RecordStatus,
}

fn finalize_spans(trace: &str, ranges: &[(usize, usize)]) -> Vec<OffloadSpan> {
    let spans: Vec<OffloadSpan> = ranges
        .iter()
        .map(|&(s, e)| OffloadSpan::new(s, e, SpanOrigin::Annotated))
        .collect();
    merge_spans(&spans)
        .into_iter()
        .map(|mut s| {
            s.token_estimate = text::words_starting_in(trace, &[s.range()]) as u64;
            s
        })
        .collect()
}

fn fraction_of(trace: &str, spans: &[OffloadSpan]) -> f64 {
    let ranges: Vec<_> = spans.iter().map(OffloadSpan::range).collect();
    word_fraction(trace, &ranges)
}

/// Matches, merges, enforces the coverage limit and wraps. Snippets over the
/// limit are dropped lowest-similarity first (ties: longer, then later).
pub fn annotate_record(
    question: &str,
    trace: &str,
    snippets: &[String],
    config: &MatchConfig,
    tags: &ControlTags,
) -> AnnotationRecord {
    let mut matches: Vec<SnippetMatch> = snippets
        .iter()
        .enumerate()
        .map(|(i, s)| SnippetMatch {
            snippet: i,
            found: fuzzy_match(trace, s, config),
            retained: false,
        })
        .collect();
    let mut kept: Vec<usize> = (0..matches.len()).filter(|&i| matches[i].found.is_some()).collect();
    let unmatched = matches.len() - kept.len();
    let range_of = |i: usize, m: &[SnippetMatch]| {
        let f = m[i].found.expect("kept snippets matched");
        (f.start, f.end)
    };

    let mut dropped = 0usize;
    loop {
        let ranges: Vec<_> = kept.iter().map(|&i| range_of(i, &matches)).collect();
        let spans = finalize_spans(trace, &ranges);
        if fraction_of(trace, &spans) <= config.max_total_fraction || kept.is_empty() {
            break;
        }
        let worst = kept
            .iter()
            .enumerate()
            .min_by(|(_, &a), (_, &b)| {
                let fa = matches[a].found.expect("matched");
                let fb = matches[b].found.expect("matched");
                fa.similarity
                    .total_cmp(&fb.similarity)
                    .then((fb.end - fb.start).cmp(&(fa.end - fa.start)))
                    .then(fb.start.cmp(&fa.start))
                    .then(b.cmp(&a))
            })
            .map(|(pos, _)| pos)
            .expect("nonempty");
        kept.remove(worst);
        dropped += 1;
    }
    for &i in &kept {
        matches[i].retained = true;
    }

    let ranges: Vec<_> = kept.iter().map(|&i| range_of(i, &matches)).collect();
    let mut spans = finalize_spans(trace, &ranges);
    let mut status = if snippets.is_empty() {
        RecordStatus::Partial {
            unmatched: 0,
            dropped: 0,
        }
    } else if unmatched == snippets.len() {
        RecordStatus::Rejected {
            reason: RejectReason::NoMatch,
        }
    } else if kept.is_empty() {
        RecordStatus::Rejected {
            reason: RejectReason::OverLimit,
        }
    } else if unmatched > 0 || dropped > 0 {
        RecordStatus::Partial { unmatched, dropped }
    } else {
        RecordStatus::Ok
    };

    let mut annotated = wrap_spans(trace, &spans, tags).unwrap_or_else(|_| trace.to_string());
    let round_trips = tags.strip_offload_tags(&annotated) == trace
        && extract_spans_as(&annotated, tags, SpanOrigin::Annotated).ok().as_ref() == Some(&spans);
    if !round_trips {
        status = RecordStatus::Rejected {
            reason: RejectReason::TagCollision,
        };
        spans.clear();
        annotated = trace.to_string();
        for m in &mut matches {
            m.retained = false;
        }
    }
    AnnotationRecord {
        question: question.to_string(),
        trace: trace.to_string(),
        snippets: snippets.to_vec(),
        snippet_matches: matches,
        offload_fraction: fraction_of(trace, &spans),
        matched_spans: spans,
        annotated_text: annotated,
        status,
    }
}
