use std::io::{BufRead, BufReader};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::sse::{stop_string, CompletionResponse, SseDecoder, SseEvent};
use super::{
    find_stop, Backend, BackendError, Completion, CompletionRequest, DecodeRequest, FinishReason,
    Role, SessionContext, StreamChunk,
};

fn default_path() -> String {
    "/v1/completions".into()
}

fn default_timeout() -> f64 {
    120.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Base URL, e.g. `http://127.0.0.1:8000`.
    pub endpoint: String,
    #[serde(default = "default_path")]
    pub path: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_true")]
    pub supports_probe: bool,
}

impl HttpBackendConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            path: default_path(),
            model: model.into(),
            auth_env: None,
            timeout_s: default_timeout(),
            supports_probe: true,
        }
    }

    pub fn url(&self) -> String {
        format!("{}{}", self.endpoint.trim_end_matches('/'), self.path)
    }
}

/// Session against a stateless OpenAI-compatible completions server. The
/// committed context is resent as the prompt on every call.
pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
    token: Option<String>,
    session: SessionContext,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig, role: Role) -> Result<Self, BackendError> {
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::Transport {
                message: format!("auth variable {var} is not set"),
                retriable: false,
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            session: SessionContext::new(format!("http-{role}-{}", config.model), role),
            config,
            agent,
            token,
        })
    }

    fn post(&self, body: &CompletionRequest) -> Result<ureq::http::Response<ureq::Body>, BackendError> {
        let mut req = self.agent.post(self.config.url());
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let resp = req.send_json(body).map_err(transport)?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(BackendError::Transport {
                message: format!("HTTP {status} from {}", self.config.url()),
                retriable: status == 429 || status >= 500,
            });
        }
        Ok(resp)
    }

    fn body(&self, request: &DecodeRequest, stream: bool) -> CompletionRequest {
        CompletionRequest {
            model: self.config.model.clone(),
            prompt: self.session.text().to_string(),
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            stop: request.stop.clone(),
            stream,
        }
    }

    fn decode_streamed(&self, request: &DecodeRequest) -> Result<Completion, BackendError> {
        let started = Instant::now();
        let resp = self.post(&self.body(request, true))?;
        let reader = BufReader::new(resp.into_body().into_reader());
        let mut decoder = SseDecoder::new();
        let mut chunks = Vec::new();
        let mut finish = None;
        let mut stop_reason = None;
        let mut on_event = |event: SseEvent, chunks: &mut Vec<StreamChunk>| -> bool {
            match event {
                SseEvent::Delta {
                    text: delta,
                    finish_reason,
                    stop_reason: matched,
                } => {
                    if !delta.is_empty() {
                        chunks.push(StreamChunk {
                            text: delta,
                            tokens: 1,
                            timestamp_s: started.elapsed().as_secs_f64(),
                        });
                    }
                    if finish_reason.is_some() {
                        finish = finish_reason;
                    }
                    if matched.is_some() {
                        stop_reason = matched;
                    }
                    false
                }
                SseEvent::Done => true,
            }
        };
        let mut done = false;
        for line in reader.lines() {
            let line = line.map_err(|e| BackendError::Interrupted {
                partial: chunks.iter().map(|c: &StreamChunk| c.text.as_str()).collect(),
                cause: e.to_string(),
            })?;
            if let Some(event) = decoder.push_line(&line)? {
                if on_event(event, &mut chunks) {
                    done = true;
                    break;
                }
            }
        }
        if !done {
            if let Some(event) = decoder.finish()? {
                on_event(event, &mut chunks);
            }
        }
        if !done && finish.is_none() {
            return Err(BackendError::Interrupted {
                partial: chunks.iter().map(|c| c.text.as_str()).collect(),
                cause: "stream closed before completion".into(),
            });
        }
        Ok(finalize(chunks, finish, stop_reason, request))
    }

    fn decode_blocking(&self, request: &DecodeRequest) -> Result<Completion, BackendError> {
        let started = Instant::now();
        let resp = self.post(&self.body(request, false))?;
        let body: CompletionResponse = resp
            .into_body()
            .read_json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let choice = body
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("response without choices".into()))?;
        let tokens = body
            .usage
            .map(|u| u.completion_tokens)
            .unwrap_or_else(|| crate::text::char_len(&choice.text) as u64);
        let chunks = if choice.text.is_empty() {
            Vec::new()
        } else {
            vec![StreamChunk {
                text: choice.text,
                tokens: tokens.min(u64::from(u32::MAX)) as u32,
                timestamp_s: started.elapsed().as_secs_f64(),
            }]
        };
        Ok(finalize(
            chunks,
            choice.finish_reason,
            stop_string(choice.stop_reason),
            request,
        ))
    }
}

fn transport(e: ureq::Error) -> BackendError {
    let retriable = matches!(
        e,
        ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed
    );
    BackendError::Transport {
        message: e.to_string(),
        retriable,
    }
}

/// Applies client-side stop enforcement (servers may ignore `stop`) and maps
/// the server finish reason.
fn finalize(
    mut chunks: Vec<StreamChunk>,
    server_finish: Option<String>,
    stop_reason: Option<String>,
    request: &DecodeRequest,
) -> Completion {
    let full: String = chunks.iter().map(|c| c.text.as_str()).collect();
    if let Some((idx, stop)) = find_stop(&full, &request.stop) {
        let mut seen = 0usize;
        chunks.retain_mut(|c| {
            if seen >= idx {
                return false;
            }
            if seen + c.text.len() > idx {
                c.text.truncate(idx - seen);
            }
            seen += c.text.len();
            true
        });
        return Completion {
            chunks,
            finish: FinishReason::Stop(stop.to_string()),
        };
    }
    let finish = match (server_finish.as_deref(), stop_reason) {
        (Some("length"), _) => FinishReason::Length,
        (Some("stop"), Some(s)) if request.stop.contains(&s) => FinishReason::Stop(s),
        _ => FinishReason::EndOfSequence,
    };
    Completion { chunks, finish }
}

impl Backend for HttpBackend {
    fn session(&self) -> &SessionContext {
        &self.session
    }

    fn prefill(&mut self, at: usize, chunk: &str) -> Result<usize, BackendError> {
        self.session.append_at(at, chunk)
    }

    fn decode_stream(&mut self, request: &DecodeRequest) -> Result<Completion, BackendError> {
        request.validate()?;
        let completion = if request.stream {
            self.decode_streamed(request)?
        } else {
            self.decode_blocking(request)?
        };
        self.session.append(&completion.text());
        Ok(completion)
    }

    fn greedy_probe(&mut self, max_probe_tokens: u32) -> Result<String, BackendError> {
        if !self.config.supports_probe {
            return Err(BackendError::Unsupported("greedy probe"));
        }
        let req = DecodeRequest {
            stream: false,
            ..DecodeRequest::greedy(max_probe_tokens.max(1))
        };
        Ok(self.decode_blocking(&req)?.text())
    }

    fn rewind(&mut self, frontier: usize) -> Result<(), BackendError> {
        self.session.truncate(frontier)
    }
}
