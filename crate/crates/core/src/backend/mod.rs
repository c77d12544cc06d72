//! Model sessions. A session owns an append-only committed context (the
//! stand-in for a KV cache frontier) and exposes prefill, streamed decode and
//! a side-effect-free greedy probe.

#[cfg(feature = "http")]
mod http;
mod scripted;
pub mod sse;
pub mod stub;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "http")]
pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::{ScriptEntry, ScriptedBackend, ScriptedBehavior, Trigger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Small,
    Large,
    Annotator,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Small => "small",
            Role::Large => "large",
            Role::Annotator => "annotator",
        })
    }
}

/// Decode parameters for one call; the prompt is always the session's
/// committed context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub stream: bool,
}

impl DecodeRequest {
    pub fn greedy(max_tokens: u32) -> Self {
        Self {
            max_tokens,
            temperature: 0.0,
            stop: Vec::new(),
            stream: true,
        }
    }

    pub fn with_stop(mut self, stop: impl Into<String>) -> Self {
        self.stop.push(stop.into());
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.stop.iter().any(String::is_empty) {
            return Err(BackendError::InvalidRequest("empty stop sequence".into()));
        }
        Ok(())
    }
}

/// Wire body of an OpenAI-compatible `/v1/completions` request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
    #[serde(default)]
    pub stream: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamChunk {
    pub text: String,
    pub tokens: u32,
    /// Seconds since the start of the decode call.
    pub timestamp_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinishReason {
    Length,
    Stop(String),
    EndOfSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub chunks: Vec<StreamChunk>,
    pub finish: FinishReason,
}

impl Completion {
    pub fn text(&self) -> String {
        self.chunks.iter().map(|c| c.text.as_str()).collect()
    }

    pub fn tokens(&self) -> u64 {
        self.chunks.iter().map(|c| u64::from(c.tokens)).sum()
    }

    pub fn elapsed_s(&self) -> f64 {
        self.chunks.last().map_or(0.0, |c| c.timestamp_s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("prefill at {got} does not extend committed frontier {expected}")]
    ContextDivergence { expected: usize, got: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {message}")]
    Transport { message: String, retriable: bool },
    #[error("stream interrupted after {} chars: {cause}", partial.chars().count())]
    Interrupted { partial: String, cause: String },
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("script error: {0}")]
    Script(String),
    #[error("malformed server response: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            BackendError::Transport {
                retriable: true,
                ..
            } | BackendError::Interrupted { .. }
        )
    }
}

/// Committed context shared by all backend implementations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionContext {
    pub session_id: String,
    pub role: Role,
    text: String,
    chars: usize,
}

impl SessionContext {
    pub fn new(session_id: impl Into<String>, role: Role) -> Self {
        Self {
            session_id: session_id.into(),
            role,
            text: String::new(),
            chars: 0,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn committed(&self) -> usize {
        self.chars
    }

    pub fn append_at(&mut self, at: usize, chunk: &str) -> Result<usize, BackendError> {
        if at != self.chars {
            return Err(BackendError::ContextDivergence {
                expected: self.chars,
                got: at,
            });
        }
        self.append(chunk);
        Ok(self.chars)
    }

    pub fn append(&mut self, chunk: &str) {
        self.text.push_str(chunk);
        self.chars += chunk.chars().count();
    }

    pub fn truncate(&mut self, frontier: usize) -> Result<(), BackendError> {
        if frontier > self.chars {
            return Err(BackendError::ContextDivergence {
                expected: self.chars,
                got: frontier,
            });
        }
        let b = crate::text::byte_index(&self.text, frontier);
        self.text.truncate(b);
        self.chars = frontier;
        Ok(())
    }
}

/// One model session. Exactly one operation is in flight at a time
/// (enforced by `&mut self`); sessions may be moved across threads.
pub trait Backend: Send {
    fn session(&self) -> &SessionContext;

    fn role(&self) -> Role {
        self.session().role
    }

    fn committed(&self) -> usize {
        self.session().committed()
    }

    /// Appends `chunk` to the committed context; `at` must equal the current
    /// frontier.
    fn prefill(&mut self, at: usize, chunk: &str) -> Result<usize, BackendError>;

    /// Decodes from the committed context. The returned text is committed.
    fn decode_stream(&mut self, request: &DecodeRequest) -> Result<Completion, BackendError>;

    /// Up to `max_probe_tokens` of greedy continuation, never committed.
    fn greedy_probe(&mut self, max_probe_tokens: u32) -> Result<String, BackendError>;

    /// Drops committed context beyond `frontier`.
    fn rewind(&mut self, frontier: usize) -> Result<(), BackendError>;
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn session(&self) -> &SessionContext {
        (**self).session()
    }
    fn prefill(&mut self, at: usize, chunk: &str) -> Result<usize, BackendError> {
        (**self).prefill(at, chunk)
    }
    fn decode_stream(&mut self, request: &DecodeRequest) -> Result<Completion, BackendError> {
        (**self).decode_stream(request)
    }
    fn greedy_probe(&mut self, max_probe_tokens: u32) -> Result<String, BackendError> {
        (**self).greedy_probe(max_probe_tokens)
    }
    fn rewind(&mut self, frontier: usize) -> Result<(), BackendError> {
        (**self).rewind(frontier)
    }
}

/// Finds the earliest stop sequence in `text`: (byte index, stop).
pub(crate) fn find_stop<'a>(text: &str, stop: &'a [String]) -> Option<(usize, &'a str)> {
    stop.iter()
        .filter_map(|s| text.find(s.as_str()).map(|i| (i, s.as_str())))
        .min_by_key(|&(i, _)| i)
}
