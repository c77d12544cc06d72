use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    find_stop, Backend, BackendError, Completion, DecodeRequest, FinishReason, Role,
    SessionContext, StreamChunk,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// Fires when the session starts its `n`-th turn (1-based). A turn starts
    /// on every decode call made while no emission is pending.
    OnTurn(u32),
    /// Fires at a turn start once the committed context contains the text.
    OnContextContaining(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub trigger: Trigger,
    pub emission: String,
    /// Simulated decode speed in tokens per second.
    #[serde(default = "default_rate", alias = "rate")]
    pub emission_rate: f64,
}

fn default_rate() -> f64 {
    100.0
}

fn default_chars_per_token() -> usize {
    1
}

fn default_stream_chunk_tokens() -> u32 {
    8
}

fn default_true() -> bool {
    true
}

/// Deterministic test double for a model: an ordered list of triggered
/// emissions replayed verbatim. Text is split into tokens of
/// `chars_per_token` characters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedBehavior {
    #[serde(default, rename = "entry")]
    pub entries: Vec<ScriptEntry>,
    #[serde(default = "default_chars_per_token")]
    pub chars_per_token: usize,
    #[serde(default = "default_stream_chunk_tokens")]
    pub stream_chunk_tokens: u32,
    #[serde(default = "default_true")]
    pub supports_probe: bool,
}

impl Default for ScriptedBehavior {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            chars_per_token: default_chars_per_token(),
            stream_chunk_tokens: default_stream_chunk_tokens(),
            supports_probe: true,
        }
    }
}

impl ScriptedBehavior {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_turn(mut self, n: u32, emission: impl Into<String>) -> Self {
        self.entries.push(ScriptEntry {
            trigger: Trigger::OnTurn(n),
            emission: emission.into(),
            emission_rate: default_rate(),
        });
        self
    }

    pub fn on_context(mut self, needle: impl Into<String>, emission: impl Into<String>) -> Self {
        self.entries.push(ScriptEntry {
            trigger: Trigger::OnContextContaining(needle.into()),
            emission: emission.into(),
            emission_rate: default_rate(),
        });
        self
    }

    /// Sets the rate of every entry.
    pub fn at_rate(mut self, tokens_per_s: f64) -> Self {
        for e in &mut self.entries {
            e.emission_rate = tokens_per_s;
        }
        self
    }

    pub fn chunked(mut self, stream_chunk_tokens: u32) -> Self {
        self.stream_chunk_tokens = stream_chunk_tokens;
        self
    }

    pub fn without_probe(mut self) -> Self {
        self.supports_probe = false;
        self
    }

    pub fn from_toml_str(s: &str) -> Result<Self, BackendError> {
        let b: Self = toml::from_str(s).map_err(|e| BackendError::Script(e.to_string()))?;
        b.validate()?;
        Ok(b)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.chars_per_token == 0 {
            return Err(BackendError::Script("chars_per_token must be >= 1".into()));
        }
        if self.stream_chunk_tokens == 0 {
            return Err(BackendError::Script("stream_chunk_tokens must be >= 1".into()));
        }
        let mut turns = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if !(e.emission_rate > 0.0 && e.emission_rate.is_finite()) {
                return Err(BackendError::Script(format!("entry {i}: emission_rate must be > 0")));
            }
            match &e.trigger {
                Trigger::OnTurn(0) => {
                    return Err(BackendError::Script(format!("entry {i}: turns are 1-based")))
                }
                Trigger::OnTurn(n) if turns.contains(n) => {
                    return Err(BackendError::Script(format!("entry {i}: turn {n} scripted twice")))
                }
                Trigger::OnTurn(n) => turns.push(*n),
                Trigger::OnContextContaining(s) if s.is_empty() => {
                    return Err(BackendError::Script(format!("entry {i}: empty context trigger")))
                }
                Trigger::OnContextContaining(_) => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    behavior: ScriptedBehavior,
    session: SessionContext,
    fired: Vec<bool>,
    turn: u32,
    pending: VecDeque<char>,
    rate: f64,
}

impl ScriptedBackend {
    pub fn new(behavior: ScriptedBehavior, role: Role) -> Result<Self, BackendError> {
        behavior.validate()?;
        let fired = vec![false; behavior.entries.len()];
        Ok(Self {
            session: SessionContext::new(format!("scripted-{role}"), role),
            behavior,
            fired,
            turn: 0,
            pending: VecDeque::new(),
            rate: default_rate(),
        })
    }

    pub fn turn(&self) -> u32 {
        self.turn
    }

    /// Index of the single entry eligible to fire at the next turn start.
    fn eligible(&self) -> Result<Option<usize>, BackendError> {
        let next_turn = self.turn + 1;
        let ctx = self.session.text();
        let mut hits = self
            .behavior
            .entries
            .iter()
            .enumerate()
            .filter(|(i, e)| {
                !self.fired[*i]
                    && match &e.trigger {
                        Trigger::OnTurn(n) => *n == next_turn,
                        Trigger::OnContextContaining(s) => ctx.contains(s.as_str()),
                    }
            })
            .map(|(i, _)| i);
        let first = hits.next();
        if let Some(second) = hits.next() {
            return Err(BackendError::Script(format!(
                "ambiguous script: entries {} and {second} both match at turn {next_turn}",
                first.unwrap()
            )));
        }
        Ok(first)
    }

    fn next_token(&mut self) -> Option<String> {
        if self.pending.is_empty() {
            return None;
        }
        let n = self.behavior.chars_per_token.min(self.pending.len());
        Some(self.pending.drain(..n).collect())
    }
}

impl Backend for ScriptedBackend {
    fn session(&self) -> &SessionContext {
        &self.session
    }

    fn prefill(&mut self, at: usize, chunk: &str) -> Result<usize, BackendError> {
        self.session.append_at(at, chunk)
    }

    fn decode_stream(&mut self, request: &DecodeRequest) -> Result<Completion, BackendError> {
        request.validate()?;
        if self.pending.is_empty() {
            let hit = self.eligible()?;
            self.turn += 1;
            match hit {
                Some(i) => {
                    self.fired[i] = true;
                    let e = &self.behavior.entries[i];
                    self.pending = e.emission.chars().collect();
                    self.rate = e.emission_rate;
                }
                None => {
                    return Ok(Completion {
                        chunks: Vec::new(),
                        finish: FinishReason::EndOfSequence,
                    })
                }
            }
        }

        let max_stop = request.stop.iter().map(String::len).max().unwrap_or(0);
        let mut produced: Vec<String> = Vec::new();
        let mut out = String::new();
        let mut finish = None;
        while produced.len() < request.max_tokens as usize {
            let Some(token) = self.next_token() else { break };
            // Only the suffix that could hold a new match is searched.
            let mut window = out.len().saturating_sub(max_stop);
            while !out.is_char_boundary(window) {
                window -= 1;
            }
            out.push_str(&token);
            produced.push(token);
            if let Some((idx, stop)) = find_stop(&out[window..], &request.stop) {
                let idx = window + idx;
                // Characters past the stop go back to the pending emission.
                for c in out[idx + stop.len()..].chars().rev() {
                    self.pending.push_front(c);
                }
                out.truncate(idx);
                finish = Some(FinishReason::Stop(stop.to_string()));
                break;
            }
        }

        let per_chunk = self.behavior.stream_chunk_tokens;
        let mut chunks = Vec::new();
        let mut current = String::new();
        let mut current_tokens = 0u32;
        let mut consumed = 0usize;
        let last = produced.len();
        for (i, token) in produced.iter().enumerate() {
            let take = token.len().min(out.len() - consumed);
            current.push_str(&token[..take]);
            consumed += take;
            current_tokens += 1;
            if current_tokens == per_chunk || i + 1 == last {
                chunks.push(StreamChunk {
                    text: std::mem::take(&mut current),
                    tokens: current_tokens,
                    timestamp_s: (i + 1) as f64 / self.rate,
                });
                current_tokens = 0;
            }
        }
        let finish = finish.unwrap_or(if self.pending.is_empty() {
            FinishReason::EndOfSequence
        } else {
            FinishReason::Length
        });
        self.session.append(&out);
        Ok(Completion { chunks, finish })
    }

    fn greedy_probe(&mut self, max_probe_tokens: u32) -> Result<String, BackendError> {
        if !self.behavior.supports_probe {
            return Err(BackendError::Unsupported("greedy probe"));
        }
        let take = self.behavior.chars_per_token * max_probe_tokens as usize;
        if !self.pending.is_empty() {
            return Ok(self.pending.iter().take(take).collect());
        }
        Ok(match self.eligible()? {
            Some(i) => self.behavior.entries[i].emission.chars().take(take).collect(),
            None => String::new(),
        })
    }

    fn rewind(&mut self, frontier: usize) -> Result<(), BackendError> {
        // Discarded output is not replayed: the pending emission is unchanged.
        self.session.truncate(frontier)
    }
}
