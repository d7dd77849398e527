//! Minimal HTTP/1.1 server that replies from an ordered script and records
//! every request body.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::json;

#[derive(Debug, Clone, PartialEq)]
pub enum Matcher {
    Any,
    /// Path suffix, e.g. `"chat/completions"`.
    Path(String),
    BodyContains(String),
    PathAndBody(String, String),
}

impl Matcher {
    fn matches(&self, path: &str, body: &str) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Path(p) => path.ends_with(p.as_str()),
            Matcher::BodyContains(s) => body.contains(s.as_str()),
            Matcher::PathAndBody(p, s) => path.ends_with(p.as_str()) && body.contains(s.as_str()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StubRoute {
    pub matcher: Matcher,
    pub status: u16,
    pub body: String,
    /// Serve this route for every later matching request instead of
    /// consuming it.
    pub repeat: bool,
}

impl StubRoute {
    pub fn ok(matcher: Matcher, body: impl Into<String>) -> Self {
        Self {
            matcher,
            status: 200,
            body: body.into(),
            repeat: false,
        }
    }

    pub fn status(matcher: Matcher, status: u16, body: impl Into<String>) -> Self {
        Self {
            matcher,
            status,
            body: body.into(),
            repeat: false,
        }
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub path: String,
    pub body: String,
}

#[derive(Default)]
struct State {
    script: VecDeque<StubRoute>,
    received: Vec<RecordedRequest>,
    failures: Vec<String>,
}

pub struct StubServer {
    addr: SocketAddr,
    state: Arc<Mutex<State>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(script: Vec<StubRoute>) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let state = Arc::new(Mutex::new(State {
            script: script.into(),
            ..Default::default()
        }));
        let stop = Arc::new(AtomicBool::new(false));
        let (st, sp) = (state.clone(), stop.clone());
        let handle = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if sp.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = conn {
                    if let Err(e) = serve(stream, &st) {
                        st.lock().unwrap().failures.push(format!("io error: {e}"));
                    }
                }
            }
        });
        Ok(Self {
            addr,
            state,
            stop,
            handle: Some(handle),
        })
    }

    /// Base URL including the `/v1` prefix.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.lock().unwrap().received.clone()
    }

    /// Requests that matched no route, with their bodies.
    pub fn failures(&self) -> Vec<String> {
        self.state.lock().unwrap().failures.clone()
    }

    /// Non-repeating routes not yet served.
    pub fn pending(&self) -> usize {
        self.state.lock().unwrap().script.iter().filter(|r| !r.repeat).count()
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

fn serve(stream: TcpStream, state: &Mutex<State>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(());
    }
    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut content_length = 0usize;
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header)? == 0 || header == "\r\n" || header == "\n" {
            break;
        }
        if let Some((k, v)) = header.split_once(':') {
            if k.trim().eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let body = String::from_utf8_lossy(&body).into_owned();

    let (status, reply) = {
        let mut st = state.lock().unwrap();
        st.received.push(RecordedRequest {
            path: path.clone(),
            body: body.clone(),
        });
        let next = st.script.iter().position(|r| r.matcher.matches(&path, &body));
        // Routes are served in order: only the first pending route, or a
        // repeating one, may answer.
        let allowed = next.filter(|&i| i == 0 || st.script[i].repeat || st.script.iter().take(i).all(|r| r.repeat));
        match allowed {
            Some(i) => {
                let route = st.script[i].clone();
                if !route.repeat {
                    st.script.remove(i);
                }
                (route.status, route.body)
            }
            None => {
                st.failures.push(format!("unmatched request to {path}: {body}"));
                (400, json!({"error": "stub: unmatched request"}).to_string())
            }
        }
    };
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    )?;
    stream.flush()
}

/// Chat-completions response body with per-token logprobs. The content is
/// the concatenation of the token texts.
pub fn chat_body(tokens: &[(&str, f64)]) -> String {
    let content: String = tokens.iter().map(|(t, _)| *t).collect();
    let items: Vec<_> = tokens
        .iter()
        .map(|(t, l)| json!({"token": t, "logprob": l, "bytes": t.as_bytes(), "top_logprobs": []}))
        .collect();
    json!({
        "id": "stub",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "logprobs": {"content": items},
            "finish_reason": "stop"
        }]
    })
    .to_string()
}

/// Completions response echoing `tokens`; the first logprob is null as real
/// servers report it.
pub fn echo_body(tokens: &[(&str, f64)]) -> String {
    let mut offsets = Vec::new();
    let mut off = 0;
    for (t, _) in tokens {
        offsets.push(off);
        off += t.len();
    }
    let logprobs: Vec<serde_json::Value> = tokens
        .iter()
        .enumerate()
        .map(|(i, (_, l))| if i == 0 { serde_json::Value::Null } else { json!(l) })
        .collect();
    json!({
        "id": "stub",
        "object": "text_completion",
        "choices": [{
            "index": 0,
            "text": tokens.iter().map(|(t, _)| *t).collect::<String>(),
            "logprobs": {
                "tokens": tokens.iter().map(|(t, _)| *t).collect::<Vec<_>>(),
                "token_logprobs": logprobs,
                "text_offset": offsets
            },
            "finish_reason": "length"
        }]
    })
    .to_string()
}
