//! Local stand-in for a chat-completion endpoint, for exercising the remote
//! proposer without network access.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    /// Wrapped as `choices[0].message.content`.
    Content(String),
    /// Bare HTTP status with an empty body.
    Status(u16),
}

type Responder = dyn Fn(&Value) -> Reply + Send + Sync;

struct Shared {
    script: Mutex<VecDeque<Reply>>,
    requests: Mutex<Vec<Value>>,
    responder: Box<Responder>,
}

/// Serves scripted replies first, then whatever `responder` returns for
/// each request body.
pub struct MockChatServer {
    addr: String,
    shared: Arc<Shared>,
    _handle: JoinHandle<()>,
}

impl MockChatServer {
    pub fn start(script: Vec<Reply>, responder: impl Fn(&Value) -> Reply + Send + Sync + 'static) -> MockChatServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let addr = format!("http://{}", listener.local_addr().expect("local addr"));
        let shared = Arc::new(Shared {
            script: Mutex::new(script.into()),
            requests: Mutex::new(Vec::new()),
            responder: Box::new(responder),
        });
        let s = Arc::clone(&shared);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let s = Arc::clone(&s);
                std::thread::spawn(move || {
                    let _ = serve(stream, &s);
                });
            }
        });
        MockChatServer {
            addr,
            shared,
            _handle: handle,
        }
    }

    /// Base address to use as the proposer endpoint.
    pub fn endpoint(&self) -> &str {
        &self.addr
    }

    /// Request bodies received so far, in arrival order.
    pub fn requests(&self) -> Vec<Value> {
        self.shared.requests.lock().expect("lock").clone()
    }
}

fn serve(stream: TcpStream, s: &Shared) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut len = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    let request: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    s.requests.lock().expect("lock").push(request.clone());
    let scripted = s.script.lock().expect("lock").pop_front();
    let reply = scripted.unwrap_or_else(|| (s.responder)(&request));
    let (status, payload) = match reply {
        Reply::Content(c) => (
            200,
            json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": c}}]}).to_string(),
        ),
        Reply::Status(code) => (code, String::new()),
    };
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    out.flush()
}

/// Text of the last user message in a request body.
pub fn last_user_message(request: &Value) -> &str {
    request["messages"]
        .as_array()
        .and_then(|m| m.iter().rev().find(|m| m["role"] == "user"))
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default()
}
