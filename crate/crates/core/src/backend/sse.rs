//! Server-sent-event framing for streamed OpenAI-compatible completions.

use serde::{Deserialize, Serialize};

use super::BackendError;

/// One parsed `data:` payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SseEvent {
    Delta {
        text: String,
        finish_reason: Option<String>,
        /// Matched stop string, when the server reports it.
        stop_reason: Option<String>,
    },
    Done,
}

#[derive(Debug, Deserialize)]
struct ChunkBody {
    #[serde(default)]
    choices: Vec<ChoiceBody>,
}

#[derive(Debug, Deserialize)]
struct ChoiceBody {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    stop_reason: Option<serde_json::Value>,
}

pub(crate) fn stop_string(v: Option<serde_json::Value>) -> Option<String> {
    match v {
        Some(serde_json::Value::String(s)) => Some(s),
        _ => None,
    }
}

/// Line-oriented SSE decoder. Multi-line `data:` fields are joined with
/// newlines; an empty line dispatches the event.
#[derive(Debug, Default)]
pub struct SseDecoder {
    data: Vec<String>,
}

impl SseDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_line(&mut self, line: &str) -> Result<Option<SseEvent>, BackendError> {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            return self.dispatch();
        }
        if line.starts_with(':') {
            return Ok(None);
        }
        let (field, value) = match line.split_once(':') {
            Some((f, v)) => (f, v.strip_prefix(' ').unwrap_or(v)),
            None => (line, ""),
        };
        if field == "data" {
            self.data.push(value.to_string());
        }
        Ok(None)
    }

    /// Flushes a trailing event not followed by a blank line.
    pub fn finish(&mut self) -> Result<Option<SseEvent>, BackendError> {
        self.dispatch()
    }

    fn dispatch(&mut self) -> Result<Option<SseEvent>, BackendError> {
        if self.data.is_empty() {
            return Ok(None);
        }
        let payload = std::mem::take(&mut self.data).join("\n");
        parse_payload(&payload).map(Some)
    }
}

pub fn parse_payload(payload: &str) -> Result<SseEvent, BackendError> {
    if payload.trim() == "[DONE]" {
        return Ok(SseEvent::Done);
    }
    let body: ChunkBody = serde_json::from_str(payload)
        .map_err(|e| BackendError::Protocol(format!("bad stream chunk: {e}: {payload}")))?;
    let choice = body
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol(format!("stream chunk without choices: {payload}")))?;
    Ok(SseEvent::Delta {
        text: choice.text,
        finish_reason: choice.finish_reason,
        stop_reason: stop_string(choice.stop_reason),
    })
}

/// Non-streamed completion response body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub choices: Vec<CompletionChoice>,
    #[serde(default)]
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionChoice {
    pub text: String,
    #[serde(default)]
    pub finish_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub completion_tokens: u64,
}

/// Encodes one streamed text delta the way OpenAI-compatible servers do.
pub fn encode_delta(text: &str, finish_reason: Option<&str>, stop_reason: Option<&str>) -> String {
    let body = serde_json::json!({
        "object": "text_completion",
        "choices": [{
            "index": 0,
            "text": text,
            "finish_reason": finish_reason,
            "stop_reason": stop_reason,
        }],
    });
    format!("data: {body}\n\n")
}

pub const DONE_FRAME: &str = "data: [DONE]\n\n";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_frames() {
        let mut d = SseDecoder::new();
        let mut events = Vec::new();
        let stream = format!(
            ": keep-alive\n{}{}{}",
            encode_delta("Hel", None, None),
            encode_delta("lo", Some("stop"), Some("</b>")),
            DONE_FRAME
        );
        for line in stream.split('\n') {
            if let Some(e) = d.push_line(line).unwrap() {
                events.push(e);
            }
        }
        assert_eq!(
            events,
            vec![
                SseEvent::Delta {
                    text: "Hel".into(),
                    finish_reason: None,
                    stop_reason: None,
                },
                SseEvent::Delta {
                    text: "lo".into(),
                    finish_reason: Some("stop".into()),
                    stop_reason: Some("</b>".into()),
                },
                SseEvent::Done
            ]
        );
    }

    #[test]
    fn crlf_and_trailing_event() {
        let mut d = SseDecoder::new();
        assert_eq!(d.push_line("data: [DONE]\r").unwrap(), None);
        assert_eq!(d.finish().unwrap(), Some(SseEvent::Done));
        assert!(parse_payload("{\"choices\": []}").is_err());
        assert!(parse_payload("not json").is_err());
    }
}
