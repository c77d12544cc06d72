//! A small local OpenAI-compatible completions server for offline runs and
//! tests. Each model replays fixed transcripts: given a prompt that is a
//! prefix of one of its transcripts, it continues with the rest of that
//! transcript, one token (`chars_per_token` characters) per streamed event.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use super::sse::{encode_delta, DONE_FRAME};
use super::CompletionRequest;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptModel {
    pub transcripts: Vec<String>,
    pub chars_per_token: usize,
}

/// Result of one stub generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubGeneration {
    pub tokens: Vec<String>,
    pub finish_reason: &'static str,
    pub stop_reason: Option<String>,
}

impl TranscriptModel {
    pub fn new(transcripts: Vec<String>) -> Self {
        Self {
            transcripts,
            chars_per_token: 1,
        }
    }

    /// Continuation of the first transcript extending `prompt`.
    pub fn continuation(&self, prompt: &str) -> &str {
        self.transcripts
            .iter()
            .find(|t| t.starts_with(prompt))
            .map_or("", |t| &t[prompt.len()..])
    }

    pub fn generate(&self, request: &CompletionRequest) -> StubGeneration {
        let cont: Vec<char> = self.continuation(&request.prompt).chars().collect();
        let mut tokens = Vec::new();
        let mut text = String::new();
        for piece in cont.chunks(self.chars_per_token.max(1)) {
            if tokens.len() >= request.max_tokens as usize {
                return StubGeneration {
                    tokens,
                    finish_reason: "length",
                    stop_reason: None,
                };
            }
            let piece: String = piece.iter().collect();
            let before = text.len();
            text.push_str(&piece);
            if let Some((idx, stop)) = super::find_stop(&text, &request.stop) {
                // Emit only the part of this token that precedes the stop.
                if idx > before {
                    tokens.push(text[before..idx].to_string());
                } else if idx < before {
                    // Stop began in earlier tokens: trim them back.
                    let mut seen = 0;
                    tokens.retain_mut(|t| {
                        if seen >= idx {
                            return false;
                        }
                        if seen + t.len() > idx {
                            t.truncate(idx - seen);
                        }
                        seen += t.len();
                        true
                    });
                }
                return StubGeneration {
                    tokens,
                    finish_reason: "stop",
                    stop_reason: Some(stop.to_string()),
                };
            }
            tokens.push(piece);
        }
        StubGeneration {
            tokens,
            finish_reason: "stop",
            stop_reason: None,
        }
    }
}

/// Background HTTP/1.1 server; shuts down when dropped.
pub struct StubServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    log: Arc<Mutex<Vec<CompletionRequest>>>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(models: HashMap<String, TranscriptModel>) -> io::Result<Self> {
        Self::bind("127.0.0.1:0", models)
    }

    pub fn bind(addr: &str, models: HashMap<String, TranscriptModel>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let log = Arc::new(Mutex::new(Vec::new()));
        let models = Arc::new(models);
        let handle = {
            let stop = Arc::clone(&stop);
            let log = Arc::clone(&log);
            std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let models = Arc::clone(&models);
                    let log = Arc::clone(&log);
                    std::thread::spawn(move || {
                        if let Err(e) = serve(conn, &models, &log) {
                            log::debug!("stub connection error: {e}");
                        }
                    });
                }
            })
        };
        Ok(Self {
            addr,
            stop,
            log,
            handle: Some(handle),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.log.lock().expect("stub log poisoned").clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(
    conn: TcpStream,
    models: &HashMap<String, TranscriptModel>,
    log: &Mutex<Vec<CompletionRequest>>,
) -> io::Result<()> {
    let mut reader = BufReader::new(conn.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let mut out = conn;

    let mut parts = request_line.split_whitespace();
    let (method, path) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
    if method != "POST" || path != "/v1/completions" {
        return respond(&mut out, "404 Not Found", "application/json", "{\"error\":\"not found\"}");
    }
    let request: CompletionRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.to_string() }).to_string();
            return respond(&mut out, "400 Bad Request", "application/json", &msg);
        }
    };
    log.lock().expect("stub log poisoned").push(request.clone());
    let Some(model) = models.get(&request.model) else {
        return respond(&mut out, "404 Not Found", "application/json", "{\"error\":\"unknown model\"}");
    };
    let generation = model.generate(&request);

    if request.stream {
        write!(
            out,
            "HTTP/1.1 200 OK\r\nContent-Type: text/event-stream\r\nConnection: close\r\n\r\n"
        )?;
        for t in &generation.tokens {
            out.write_all(encode_delta(t, None, None).as_bytes())?;
        }
        out.write_all(
            encode_delta(
                "",
                Some(generation.finish_reason),
                generation.stop_reason.as_deref(),
            )
            .as_bytes(),
        )?;
        out.write_all(DONE_FRAME.as_bytes())?;
        out.flush()
    } else {
        let text: String = generation.tokens.concat();
        let body = serde_json::json!({
            "object": "text_completion",
            "model": request.model,
            "choices": [{
                "index": 0,
                "text": text,
                "finish_reason": generation.finish_reason,
                "stop_reason": generation.stop_reason,
            }],
            "usage": { "completion_tokens": generation.tokens.len() },
        });
        respond(&mut out, "200 OK", "application/json", &body.to_string())
    }
}

fn respond(out: &mut TcpStream, status: &str, content_type: &str, body: &str) -> io::Result<()> {
    write!(
        out,
        "HTTP/1.1 {status}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    out.flush()
}
