//! Drives one cooperative generation: the small model decodes and decides,
//! the large model takes over inside offload regions, and prefills keep both
//! sessions' contexts equal to the prompt plus the trace so far.

mod control;
mod policy;

pub use control::{controlling_prefill_cycle, ControlDecision, CycleOutcome};
pub use policy::{planned_fraction, random_offload_policy, Policy, PolicyParseError};

use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, Completion, DecodeRequest, FinishReason};
use crate::protocol::{
    GenerationTrace, OffloadSpan, Phase, ProtocolError, ProtocolEvent, ProtocolState, ScannerState,
    SpanOrigin, TagEvent, TagKind,
};
use crate::tags::ControlTags;
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Streaming prefill runs between small-model decode calls.
    #[default]
    Sequential,
    /// Streaming prefill runs on a worker thread while the small model decodes.
    Overlapped,
}

fn default_chunk() -> u32 {
    64
}

fn default_span_budget() -> u64 {
    1024
}

fn default_max_total() -> u64 {
    32_768
}

fn default_probe() -> u32 {
    16
}

fn default_true() -> bool {
    true
}

fn default_buffer() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_chunk")]
    pub chunk_size: u32,
    #[serde(default = "default_span_budget")]
    pub max_offload_tokens_per_span: u64,
    #[serde(default = "default_max_total")]
    pub max_total_tokens: u64,
    #[serde(default)]
    pub policy: Policy,
    /// Initial greedy probe length for controlling checks.
    #[serde(default = "default_probe")]
    pub probe_tokens: u32,
    #[serde(default = "default_true")]
    pub stop_on_answer_close: bool,
    #[serde(default)]
    pub mode: RunMode,
    /// Capacity of the streaming-prefill queue in overlapped mode.
    #[serde(default = "default_buffer")]
    pub stream_buffer: usize,
    #[serde(default)]
    pub tags: ControlTags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            chunk_size: default_chunk(),
            max_offload_tokens_per_span: default_span_budget(),
            max_total_tokens: default_max_total(),
            policy: Policy::default(),
            probe_tokens: default_probe(),
            stop_on_answer_close: true,
            mode: RunMode::default(),
            stream_buffer: default_buffer(),
            tags: ControlTags::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.chunk_size == 0 {
            return Err("chunk_size must be >= 1".into());
        }
        if self.probe_tokens == 0 {
            return Err("probe_tokens must be >= 1".into());
        }
        if self.max_offload_tokens_per_span == 0 {
            return Err("max_offload_tokens_per_span must be >= 1".into());
        }
        self.tags.validate().map_err(|e| e.to_string())?;
        self.policy.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    ToLarge,
    ToSmall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HandoffReason {
    /// The small model wrote the open tag.
    OpenTag,
    /// The small model's probe and decode produced the close tag.
    CloseTag,
    /// A random-policy span boundary.
    Planned,
    /// The span hit its token budget.
    BudgetExhausted,
    /// The large model wrote the close tag itself.
    LargeClosed,
    /// The large model ended its sequence inside the region.
    LargeStopped,
    /// The probe predicted the close tag but the decode did not produce it.
    ProbeMismatch,
    /// The run ended inside a span.
    RunEnded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandoffEntry {
    /// Stripped-text offset of the boundary.
    pub offset: usize,
    pub direction: Direction,
    pub reason: HandoffReason,
    pub forced: bool,
    /// On takeback: large tokens decoded since the last controlling check
    /// that could have continued, an upper bound on overshoot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overshoot_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: Phase,
    pub tokens: u64,
    /// Backend-reported seconds (simulated for scripted backends).
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Small,
    Large,
    /// Tags inserted by the orchestrator itself.
    Orchestrator,
}

/// Who produced `text[start..end)` (character offsets of the full text).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceSegment {
    pub source: Source,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    EndOfSequence,
    AnswerClosed,
    TokenLimit,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub trace: GenerationTrace,
    pub timing: Vec<PhaseTiming>,
    pub handoffs: Vec<HandoffEntry>,
    pub provenance: Vec<ProvenanceSegment>,
    /// Small-model tokens decoded but cut from the trace (text after an
    /// open tag in the same chunk, rejected degraded checks).
    pub discarded_small_tokens: u64,
    /// Offload regions the large model left empty; not listed in spans.
    pub empty_offloads: u64,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl GenerationResult {
    /// Concatenated text produced by `source`.
    pub fn text_from(&self, source: Source) -> String {
        self.provenance
            .iter()
            .filter(|p| p.source == source)
            .map(|p| text::slice_chars(&self.trace.text, p.start, p.end))
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run: {0}")]
    Config(String),
    #[error("backend failure: {source}")]
    Backend {
        source: BackendError,
        partial: Box<GenerationResult>,
    },
    #[error("protocol error: {source}")]
    Protocol {
        source: ProtocolError,
        partial: Box<GenerationResult>,
    },
}

impl RunError {
    pub fn partial(&self) -> Option<&GenerationResult> {
        match self {
            RunError::Config(_) => None,
            RunError::Backend { partial, .. } | RunError::Protocol { partial, .. } => Some(partial),
        }
    }
}

enum Failure {
    Backend(BackendError),
    Protocol(ProtocolError),
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        Failure::Backend(e)
    }
}

impl From<ProtocolError> for Failure {
    fn from(e: ProtocolError) -> Self {
        Failure::Protocol(e)
    }
}

type Sink<'s> = dyn FnMut(usize, String) -> Result<(), BackendError> + 's;

/// Full trace text plus a scanner over it; every appended piece is scanned
/// so tag counts and stripped offsets stay exact.
struct TextLog {
    text: String,
    chars: usize,
    tag_chars: usize,
    scanner: ScannerState,
    provenance: Vec<ProvenanceSegment>,
}

impl TextLog {
    fn new() -> Self {
        Self {
            text: String::new(),
            chars: 0,
            tag_chars: 0,
            scanner: ScannerState::new(),
            provenance: Vec::new(),
        }
    }

    fn stripped_len(&self) -> usize {
        self.chars - self.tag_chars
    }

    /// Appends and returns tag events with their stripped offsets.
    fn push(&mut self, s: &str, source: Source, tags: &ControlTags) -> Vec<(TagEvent, usize)> {
        if s.is_empty() {
            return Vec::new();
        }
        let events = self.scanner.feed(s, tags);
        let n = text::char_len(s);
        match self.provenance.last_mut() {
            Some(last) if last.source == source && last.end == self.chars => last.end += n,
            _ => self.provenance.push(ProvenanceSegment {
                source,
                start: self.chars,
                end: self.chars + n,
            }),
        }
        self.text.push_str(s);
        self.chars += n;
        events
            .into_iter()
            .map(|ev| {
                let stripped = ev.offset - self.tag_chars;
                self.tag_chars += match ev.kind {
                    TagKind::Open => text::char_len(&tags.open_tag),
                    TagKind::Close => text::char_len(&tags.close_tag),
                };
                (ev, stripped)
            })
            .collect()
    }
}

/// Coordinator state; backends are passed in separately so that the large
/// session can be lent to a prefill worker.
struct Driver<'c> {
    config: &'c RunConfig,
    tags: &'c ControlTags,
    prompt_chars: usize,
    log: TextLog,
    /// Characters / bytes of `log.text` already in the large context.
    large_synced: (usize, usize),
    state: ProtocolState,
    spans: Vec<OffloadSpan>,
    span_tokens: u64,
    span_origin: SpanOrigin,
    handoffs: Vec<HandoffEntry>,
    timing: Vec<PhaseTiming>,
    small_tokens: u64,
    large_tokens: u64,
    discarded_small: u64,
    empty_offloads: u64,
    warnings: Vec<String>,
    termination: Option<Termination>,
    plan: Vec<OffloadSpan>,
    next_plan: usize,
    probe_tokens: u32,
}

enum SmallOutcome {
    Handoff,
    Finished,
}

impl<'c> Driver<'c> {
    fn new(config: &'c RunConfig, prompt_chars: usize) -> Self {
        let plan = match config.policy {
            Policy::RandomOffload {
                p,
                seed,
                mean_span_tokens,
            } => random_offload_policy(config.max_total_tokens, p, seed, mean_span_tokens),
            _ => Vec::new(),
        };
        Self {
            config,
            tags: &config.tags,
            prompt_chars,
            log: TextLog::new(),
            large_synced: (0, 0),
            state: ProtocolState::new(config.max_offload_tokens_per_span),
            spans: Vec::new(),
            span_tokens: 0,
            span_origin: SpanOrigin::Emitted,
            handoffs: Vec::new(),
            timing: Vec::new(),
            small_tokens: 0,
            large_tokens: 0,
            discarded_small: 0,
            empty_offloads: 0,
            warnings: Vec::new(),
            termination: None,
            plan,
            next_plan: 0,
            probe_tokens: config.probe_tokens,
        }
    }

    fn used(&self) -> u64 {
        self.small_tokens + self.large_tokens
    }

    fn remaining(&self) -> u64 {
        self.config.max_total_tokens.saturating_sub(self.used())
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    fn time(&mut self, phase: Phase, tokens: u64, seconds: f64) {
        match self.timing.last_mut() {
            Some(t) if t.phase == phase => {
                t.tokens += tokens;
                t.seconds += seconds;
            }
            _ => self.timing.push(PhaseTiming {
                phase,
                tokens,
                seconds,
            }),
        }
    }

    fn small_frontier(&self) -> usize {
        self.prompt_chars + self.log.chars
    }

    /// Sends trace text not yet in the large context to `sink`.
    fn stream_pending(&mut self, sink: &mut Sink<'_>) -> Result<(), BackendError> {
        if self.large_synced.0 == self.log.chars {
            return Ok(());
        }
        let chunk = self.log.text[self.large_synced.1..].to_string();
        let at = self.prompt_chars + self.large_synced.0;
        self.large_synced = (self.log.chars, self.log.text.len());
        sink(at, chunk)
    }

    fn planned_start(&self) -> Option<u64> {
        self.plan.get(self.next_plan).map(|s| s.start as u64)
    }

    fn planned_end(&self) -> Option<u64> {
        self.plan.get(self.next_plan).map(|s| s.end as u64)
    }

    fn open(&mut self, offset: usize, reason: HandoffReason, origin: SpanOrigin) -> Result<(), Failure> {
        let t = self.state.step(ProtocolEvent::OpenTagSeen { offset })?;
        self.state = t.state;
        self.span_tokens = 0;
        self.span_origin = origin;
        self.probe_tokens = self.config.probe_tokens;
        self.handoffs.push(HandoffEntry {
            offset,
            direction: Direction::ToLarge,
            reason,
            forced: false,
            overshoot_tokens: None,
        });
        Ok(())
    }

    fn close(
        &mut self,
        event: ProtocolEvent,
        reason: HandoffReason,
        overshoot: Option<u64>,
    ) -> Result<(), Failure> {
        let t = self.state.step(event)?;
        self.state = t.state;
        let closed = t.closed.expect("closing transition reports the span");
        let forced = closed.forced || reason == HandoffReason::ProbeMismatch;
        if closed.end > closed.start {
            let planned_end = reason == HandoffReason::RunEnded && self.span_origin == SpanOrigin::RandomPolicy;
            let origin = if forced && !planned_end {
                SpanOrigin::ForcedTakeback
            } else {
                self.span_origin
            };
            let mut span = OffloadSpan::new(closed.start, closed.end, origin);
            span.token_estimate = self.span_tokens;
            self.spans.push(span);
            self.handoffs.push(HandoffEntry {
                offset: closed.end,
                direction: Direction::ToSmall,
                reason,
                forced,
                overshoot_tokens: overshoot,
            });
        } else {
            self.empty_offloads += 1;
            self.handoffs.pop();
        }
        Ok(())
    }

    /// Inserts the close tag on the orchestrator's behalf.
    fn insert_close(
        &mut self,
        small: &mut dyn Backend,
        event: fn(usize) -> ProtocolEvent,
        reason: HandoffReason,
        overshoot: Option<u64>,
    ) -> Result<(), Failure> {
        let offset = self.log.stripped_len();
        self.close(event(offset), reason, overshoot)?;
        let at = self.small_frontier();
        let tag = self.tags.close_tag.clone();
        self.log.push(&tag, Source::Orchestrator, self.tags);
        small.prefill(at, &tag)?;
        Ok(())
    }

    fn insert_open(&mut self, small: &mut dyn Backend, sink: &mut Sink<'_>) -> Result<(), Failure> {
        let offset = self.log.stripped_len();
        self.open(offset, HandoffReason::Planned, SpanOrigin::RandomPolicy)?;
        let at = self.small_frontier();
        let tag = self.tags.open_tag.clone();
        self.log.push(&tag, Source::Orchestrator, self.tags);
        small.prefill(at, &tag)?;
        self.stream_pending(sink)?;
        Ok(())
    }

    fn answer_closed(&self, from_byte: usize) -> Option<usize> {
        if !self.config.stop_on_answer_close {
            return None;
        }
        let tag = &self.tags.answer_close;
        let mut start = from_byte.saturating_sub(tag.len());
        while !self.log.text.is_char_boundary(start) {
            start -= 1;
        }
        self.log.text[start..].find(tag.as_str()).map(|i| start + i + tag.len())
    }

    /// Small-model decoding until a handoff or the end of the run. On entry
    /// after a takeback the machine is still in `LargeDecoding` and the
    /// small model is expected to open with the close tag.
    fn small_phase(
        &mut self,
        small: &mut dyn Backend,
        sink: &mut Sink<'_>,
        mut seed: Option<String>,
        overshoot: Option<u64>,
    ) -> Result<SmallOutcome, Failure> {
        self.stream_pending(sink)?;
        let mut awaiting_close = self.state.phase() == Phase::LargeDecoding;
        let close_tokens = text::char_len(&self.tags.close_tag) as u32;
        loop {
            if seed.is_none() && self.remaining() == 0 {
                return self.finish_small(small, Termination::TokenLimit);
            }
            let mut budget = self.remaining();
            if !awaiting_close {
                if let Some(start) = self.planned_start() {
                    if self.used() >= start {
                        self.insert_open(small, sink)?;
                        return Ok(SmallOutcome::Handoff);
                    }
                    budget = budget.min(start - self.used());
                }
            }
            let mut want = u64::from(self.config.chunk_size);
            if awaiting_close {
                want = want.max(u64::from(close_tokens));
            }
            let completion = if budget == 0 {
                Completion {
                    chunks: Vec::new(),
                    finish: FinishReason::Length,
                }
            } else {
                let req = DecodeRequest::greedy(want.min(budget) as u32);
                small.decode_stream(&req)?
            };
            let decoded = completion.tokens();
            self.small_tokens += decoded;
            let mut out = seed.take().unwrap_or_default();
            out.push_str(&completion.text());

            if awaiting_close {
                awaiting_close = false;
                if !out.starts_with(self.tags.close_tag.as_str()) {
                    // The probe promised a close tag the decode did not deliver.
                    let msg = format!(
                        "takeback decode began with {:?} instead of the close tag",
                        out.chars().take(16).collect::<String>()
                    );
                    self.warn(msg);
                    small.rewind(self.small_frontier())?;
                    self.discarded_small += decoded;
                    self.insert_close(
                        small,
                        |o| ProtocolEvent::BudgetExhausted { offset: o },
                        HandoffReason::ProbeMismatch,
                        overshoot,
                    )?;
                    self.stream_pending(sink)?;
                    continue;
                }
            }

            let before_bytes = self.log.text.len();
            let (accepted, cut) = self.accept_prefix(&out);
            let kept_tokens = if cut {
                kept_token_count(&completion, text::char_len(&accepted), text::char_len(&out))
            } else {
                decoded
            };
            self.discarded_small += decoded - kept_tokens;
            self.time(Phase::SmallDecoding, kept_tokens, completion.elapsed_s());
            let events = self.log.push(&accepted, Source::Small, self.tags);
            if cut {
                small.rewind(self.small_frontier())?;
            }
            self.stream_pending(sink)?;

            let mut handoff = false;
            for (ev, stripped) in events {
                match (ev.kind, self.state.phase()) {
                    (_, _) if self.config.policy != Policy::LearnedTags => {}
                    (TagKind::Close, Phase::LargeDecoding) => {
                        self.close(
                            ProtocolEvent::CloseTagSeen { offset: stripped },
                            HandoffReason::CloseTag,
                            overshoot,
                        )?;
                    }
                    (TagKind::Open, Phase::SmallDecoding) => {
                        self.open(stripped, HandoffReason::OpenTag, SpanOrigin::Emitted)?;
                        handoff = true;
                    }
                    (kind, phase) => {
                        let msg = format!("ignoring stray {kind:?} tag at {stripped} during {phase:?}");
                        self.warn(msg);
                    }
                }
            }
            if handoff {
                return Ok(SmallOutcome::Handoff);
            }
            if self.answer_closed(before_bytes).is_some() {
                return self.finish_small(small, Termination::AnswerClosed);
            }
            if completion.finish == FinishReason::EndOfSequence || (decoded == 0 && budget > 0) {
                return self.finish_small(small, Termination::EndOfSequence);
            }
        }
    }

    /// Splits `out` at the first point where the small model must stop: just
    /// after an open tag (when following tags) or after the answer close tag.
    fn accept_prefix(&self, out: &str) -> (String, bool) {
        let mut probe = self.log.scanner.clone();
        let mut cut_byte: Option<usize> = None;
        if self.config.policy == Policy::LearnedTags {
            let events = probe.feed(out, self.tags);
            let base = self.log.chars;
            if let Some(ev) = events.iter().find(|e| e.kind == TagKind::Open) {
                let end_char = ev.offset + text::char_len(&self.tags.open_tag) - base;
                cut_byte = Some(text::byte_index(out, end_char));
            }
        }
        if self.config.stop_on_answer_close {
            let tag = &self.tags.answer_close;
            let tail_start = self.log.text.len().saturating_sub(tag.len());
            let mut s = tail_start;
            while !self.log.text.is_char_boundary(s) {
                s -= 1;
            }
            let joined = format!("{}{}", &self.log.text[s..], out);
            if let Some(i) = joined.find(tag.as_str()) {
                let end = (i + tag.len()).saturating_sub(self.log.text.len() - s);
                cut_byte = Some(cut_byte.map_or(end, |c| c.min(end)));
            }
        }
        match cut_byte {
            Some(b) if b < out.len() => (out[..b].to_string(), true),
            _ => (out.to_string(), false),
        }
    }

    fn finish_small(&mut self, small: &mut dyn Backend, why: Termination) -> Result<SmallOutcome, Failure> {
        if self.state.phase() == Phase::LargeDecoding {
            self.insert_close(
                small,
                |o| ProtocolEvent::EndOfStream { offset: o },
                HandoffReason::RunEnded,
                None,
            )?;
        } else {
            let offset = self.log.stripped_len();
            self.state = self.state.step(ProtocolEvent::EndOfStream { offset })?.state;
        }
        self.termination = Some(why);
        Ok(SmallOutcome::Finished)
    }

    /// Large-model decoding inside one offload region. Returns the seed text
    /// for the small model's takeback decode, if any, and the overshoot.
    fn large_phase(
        &mut self,
        small: &mut dyn Backend,
        large: &mut dyn Backend,
    ) -> Result<LargeOutcome, Failure> {
        let planned_end = if self.span_origin == SpanOrigin::RandomPolicy {
            self.planned_end()
        } else {
            None
        };
        let cap = self
            .config
            .probe_tokens
            .max(text::char_len(&self.tags.close_tag) as u32);
        let close = self.tags.close_tag.clone();
        // Trailing output that may be the start of a close tag split across
        // decode calls; committed in the large session but not yet logged.
        let mut held = String::new();
        // Tokens already charged for `held`, refunded if it is discarded.
        let mut held_tokens = 0u64;
        loop {
            let remaining = self.remaining();
            if remaining == 0 {
                self.flush_held(small, &mut held)?;
                self.insert_close(
                    small,
                    |o| ProtocolEvent::EndOfStream { offset: o },
                    HandoffReason::RunEnded,
                    None,
                )?;
                self.termination = Some(Termination::TokenLimit);
                return Ok(LargeOutcome::Finished);
            }
            if let Some(end) = planned_end {
                if self.used() >= end {
                    self.next_plan += 1;
                    self.flush_held(small, &mut held)?;
                    self.insert_close(
                        small,
                        |o| ProtocolEvent::CloseTagSeen { offset: o },
                        HandoffReason::Planned,
                        None,
                    )?;
                    return Ok(LargeOutcome::Resume(None, None));
                }
            }
            if self.state.budget_exhausted() {
                self.flush_held(small, &mut held)?;
                self.insert_close(
                    small,
                    |o| ProtocolEvent::BudgetExhausted { offset: o },
                    HandoffReason::BudgetExhausted,
                    None,
                )?;
                self.skip_planned_span();
                return Ok(LargeOutcome::Resume(None, None));
            }
            let mut want = u64::from(self.config.chunk_size)
                .min(self.state.offload_budget_remaining())
                .min(remaining);
            if let Some(end) = planned_end {
                want = want.min(end - self.used());
            }
            let req = DecodeRequest::greedy(want as u32).with_stop(self.tags.close_tag.clone());
            let completion = large.decode_stream(&req)?;
            let tokens = completion.tokens();
            let new_text = completion.text();
            let new_chars = text::char_len(&new_text);
            let held_chars = text::char_len(&held);
            let mut chunk = std::mem::take(&mut held);
            chunk.push_str(&new_text);
            let mut finish = completion.finish.clone();
            // Tokens of held + new text that end up logged or held.
            let prior = std::mem::take(&mut held_tokens);
            let mut charged = prior + tokens;
            if let Some(i) = chunk.find(close.as_str()) {
                let keep = text::char_len(&chunk[..i]);
                chunk.truncate(i);
                large.rewind(self.prompt_chars + self.log.chars + keep)?;
                finish = FinishReason::Stop(close.clone());
                charged = if keep >= held_chars {
                    prior + kept_token_count(&completion, keep - held_chars, new_chars)
                } else {
                    (prior * keep as u64).div_ceil(held_chars as u64)
                };
            } else if finish == FinishReason::Length {
                let k = partial_tag_suffix(&chunk, &close);
                held = chunk.split_off(chunk.len() - k);
                let k = text::char_len(&held);
                held_tokens = if k > new_chars {
                    charged
                } else {
                    tokens - kept_token_count(&completion, new_chars - k, new_chars)
                };
            }
            // The span budget counts every decoded token; the reported
            // counts only what stays in the trace.
            self.state = self.state.charge(tokens);
            self.large_tokens = self.large_tokens + charged - prior;
            self.span_tokens = self.span_tokens + charged - prior;
            self.time(Phase::LargeDecoding, tokens, completion.elapsed_s());
            let at = self.small_frontier();
            for (ev, stripped) in self.log.push(&chunk, Source::Large, self.tags) {
                let msg = format!("large model wrote a {:?} tag at {stripped}", ev.kind);
                self.warn(msg);
            }
            self.large_synced = (self.log.chars, self.log.text.len());

            if planned_end.is_some() {
                // Content-blind: the small model only keeps its context current.
                small.prefill(at, &chunk)?;
                if finish != FinishReason::Length || tokens == 0 {
                    self.next_plan += 1;
                    self.insert_close(
                        small,
                        |o| ProtocolEvent::BudgetExhausted { offset: o },
                        HandoffReason::LargeStopped,
                        None,
                    )?;
                    return Ok(LargeOutcome::Resume(None, None));
                }
                continue;
            }

            let outcome = controlling_prefill_cycle(small, at, &chunk, self.tags, self.probe_tokens)?;
            self.small_tokens += outcome.decoded_tokens;
            self.discarded_small += outcome.discarded_tokens;
            if let Some(w) = outcome.warning {
                if !self.warnings.contains(&w) {
                    self.warn(w);
                }
            }
            match outcome.decision {
                ControlDecision::TakeBackControl => {
                    if !held.is_empty() {
                        large.rewind(self.prompt_chars + self.log.chars)?;
                        self.large_tokens -= held_tokens;
                        self.span_tokens -= held_tokens;
                    }
                    return Ok(LargeOutcome::Resume(outcome.seed, Some(tokens)));
                }
                ControlDecision::ContinueLarge { widen } => {
                    if widen {
                        self.probe_tokens = self.probe_tokens.saturating_mul(2).min(cap);
                    }
                }
            }
            match finish {
                FinishReason::Length if tokens > 0 => {}
                FinishReason::Stop(_) => {
                    self.insert_close(
                        small,
                        |o| ProtocolEvent::CloseTagSeen { offset: o },
                        HandoffReason::LargeClosed,
                        None,
                    )?;
                    return Ok(LargeOutcome::Resume(None, None));
                }
                _ => {
                    self.insert_close(
                        small,
                        |o| ProtocolEvent::BudgetExhausted { offset: o },
                        HandoffReason::LargeStopped,
                        None,
                    )?;
                    return Ok(LargeOutcome::Resume(None, None));
                }
            }
        }
    }

    fn flush_held(&mut self, small: &mut dyn Backend, held: &mut String) -> Result<(), Failure> {
        if held.is_empty() {
            return Ok(());
        }
        let at = self.small_frontier();
        self.log.push(held, Source::Large, self.tags);
        self.large_synced = (self.log.chars, self.log.text.len());
        small.prefill(at, held)?;
        held.clear();
        Ok(())
    }

    fn skip_planned_span(&mut self) {
        if self.span_origin == SpanOrigin::RandomPolicy {
            self.next_plan += 1;
        }
    }

    fn into_result(self, error: Option<String>) -> GenerationResult {
        let trace = GenerationTrace {
            text: self.log.text,
            handoff_count: self.handoffs.len(),
            spans: self.spans,
            small_tokens: self.small_tokens,
            large_tokens: self.large_tokens,
        };
        GenerationResult {
            trace,
            timing: self.timing,
            handoffs: self.handoffs,
            provenance: self.log.provenance,
            discarded_small_tokens: self.discarded_small,
            empty_offloads: self.empty_offloads,
            termination: if error.is_some() {
                Termination::Error
            } else {
                self.termination.unwrap_or(Termination::EndOfSequence)
            },
            warnings: self.warnings,
            error,
        }
    }
}

/// Byte length of the longest proper prefix of `tag` that ends `s`.
fn partial_tag_suffix(s: &str, tag: &str) -> usize {
    tag.char_indices()
        .skip(1)
        .map(|(i, _)| i)
        .filter(|&i| s.ends_with(&tag[..i]))
        .max()
        .unwrap_or(0)
}

enum LargeOutcome {
    Resume(Option<String>, Option<u64>),
    Finished,
}

/// Tokens of `completion` covering its first `kept_chars` characters; a
/// partly kept chunk is charged proportionally, rounding up.
fn kept_token_count(completion: &Completion, kept_chars: usize, total_chars: usize) -> u64 {
    let seed_chars = total_chars - completion.chunks.iter().map(|c| text::char_len(&c.text)).sum::<usize>();
    let mut left = kept_chars.saturating_sub(seed_chars);
    let mut kept = 0u64;
    for c in &completion.chunks {
        if left == 0 {
            break;
        }
        let n = text::char_len(&c.text);
        if n <= left {
            kept += u64::from(c.tokens);
            left -= n;
        } else {
            kept += (u64::from(c.tokens) * left as u64).div_ceil(n as u64);
            left = 0;
        }
    }
    kept
}

/// Runs one cooperative generation for `question`.
pub fn run_cooperative(
    question: &str,
    small: &mut dyn Backend,
    large: &mut dyn Backend,
    config: &RunConfig,
) -> Result<GenerationResult, RunError> {
    config.validate().map_err(RunError::Config)?;
    if question.is_empty() {
        return Err(RunError::Config("question is empty".into()));
    }
    if small.committed() != 0 || large.committed() != 0 {
        return Err(RunError::Config("backend sessions must be fresh".into()));
    }
    let prompt_chars = text::char_len(question);
    let mut driver = Driver::new(config, prompt_chars);
    let outcome = drive(&mut driver, question, small, large);
    match outcome {
        Ok(()) => Ok(driver.into_result(None)),
        Err(Failure::Backend(source)) => {
            let msg = source.to_string();
            Err(RunError::Backend {
                source,
                partial: Box::new(driver.into_result(Some(msg))),
            })
        }
        Err(Failure::Protocol(source)) => {
            let msg = source.to_string();
            Err(RunError::Protocol {
                source,
                partial: Box::new(driver.into_result(Some(msg))),
            })
        }
    }
}

fn drive(
    d: &mut Driver<'_>,
    question: &str,
    small: &mut dyn Backend,
    large: &mut dyn Backend,
) -> Result<(), Failure> {
    small.prefill(0, question)?;
    large.prefill(0, question)?;
    let mut seed = None;
    let mut overshoot = None;
    loop {
        let outcome = match d.config.mode {
            RunMode::Sequential => {
                let mut sink = |at: usize, chunk: String| large.prefill(at, &chunk).map(|_| ());
                d.small_phase(small, &mut sink, seed.take(), overshoot.take())?
            }
            RunMode::Overlapped => overlapped_small_phase(d, small, large, seed.take(), overshoot.take())?,
        };
        if let SmallOutcome::Finished = outcome {
            return Ok(());
        }
        match d.large_phase(small, large)? {
            LargeOutcome::Resume(s, o) => {
                seed = s;
                overshoot = o;
            }
            LargeOutcome::Finished => return Ok(()),
        }
    }
}

/// Small phase with the large session lent to a prefill worker fed through
/// a bounded queue; the worker is drained before the phase returns.
fn overlapped_small_phase(
    d: &mut Driver<'_>,
    small: &mut dyn Backend,
    large: &mut dyn Backend,
    seed: Option<String>,
    overshoot: Option<u64>,
) -> Result<SmallOutcome, Failure> {
    let capacity = d.config.stream_buffer.max(1);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<(usize, String)>(capacity);
        let worker = scope.spawn(move || -> Result<(), BackendError> {
            for (at, chunk) in rx {
                large.prefill(at, &chunk)?;
            }
            Ok(())
        });
        let mut sink = |at: usize, chunk: String| {
            tx.send((at, chunk)).map_err(|_| BackendError::Transport {
                message: "prefill worker stopped".into(),
                retriable: false,
            })
        };
        let result = d.small_phase(small, &mut sink, seed, overshoot);
        drop(tx);
        let worker_result = worker.join().expect("prefill worker panicked");
        match (result, worker_result) {
            (_, Err(e)) => Err(Failure::Backend(e)),
            (r, Ok(())) => r,
        }
    })
}

#[cfg(test)]
mod tests;
