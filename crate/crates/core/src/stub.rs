//! Record/replay HTTP stub speaking the chat-completion and embedding wire
//! shapes, so the remote code paths can be exercised without credentials.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::embedsvc::hash_embed;

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedChat {
    pub prompt_sha256: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedEmbedding {
    pub text_sha256: String,
    pub embedding: Vec<f64>,
}

/// Captured responses. Unrecorded embedding inputs are answered with the
/// hash embedder at `embedding_dim` when it is set, otherwise with 404.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    #[serde(default)]
    pub chat: Vec<RecordedChat>,
    #[serde(default)]
    pub embeddings: Vec<RecordedEmbedding>,
    #[serde(default)]
    pub embedding_dim: Option<usize>,
}

impl Recording {
    pub fn load(path: &Path) -> io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        std::fs::write(path, text)
    }

    pub fn record_chat(&mut self, prompt: &str, content: &str) {
        let prompt_sha256 = sha256_hex(prompt);
        self.chat.retain(|c| c.prompt_sha256 != prompt_sha256);
        self.chat.push(RecordedChat { prompt_sha256, content: content.to_string() });
    }

    fn handler(self) -> Handler {
        let chat: BTreeMap<String, String> = self.chat.into_iter().map(|c| (c.prompt_sha256, c.content)).collect();
        let emb: BTreeMap<String, Vec<f64>> = self.embeddings.into_iter().map(|e| (e.text_sha256, e.embedding)).collect();
        let dim = self.embedding_dim;
        Arc::new(move |path: &str, body: &Value| {
            if path.ends_with("/chat/completions") {
                let prompt = body.pointer("/messages/0/content").and_then(Value::as_str).unwrap_or_default();
                match chat.get(&sha256_hex(prompt)) {
                    Some(content) => (200, chat_response(content)),
                    None => (404, json!({"error": {"message": "prompt not in recording"}})),
                }
            } else if path.ends_with("/embeddings") {
                let inputs: Vec<&str> =
                    body.get("input").and_then(Value::as_array).map(|a| a.iter().filter_map(Value::as_str).collect()).unwrap_or_default();
                let mut vectors = Vec::with_capacity(inputs.len());
                for text in inputs {
                    match (emb.get(&sha256_hex(text)), dim) {
                        (Some(v), _) => vectors.push(v.clone()),
                        (None, Some(d)) => match hash_embed(text, d) {
                            Ok(v) => vectors.push(v),
                            Err(e) => return (400, json!({"error": {"message": e.to_string()}})),
                        },
                        (None, None) => return (404, json!({"error": {"message": "input not in recording"}})),
                    }
                }
                (200, embeddings_response(&vectors))
            } else {
                (404, json!({"error": {"message": format!("no route {path}")}}))
            }
        })
    }
}

pub fn chat_response(content: &str) -> Value {
    json!({
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    })
}

pub fn embeddings_response(vectors: &[Vec<f64>]) -> Value {
    let data: Vec<Value> = vectors.iter().enumerate().map(|(i, v)| json!({"object": "embedding", "index": i, "embedding": v})).collect();
    json!({"object": "list", "data": data})
}

/// Maps (request path, JSON body) to (status, JSON body).
pub type Handler = Arc<dyn Fn(&str, &Value) -> (u16, Value) + Send + Sync>;

/// Single-threaded HTTP/1.1 server on localhost. Stops when dropped.
pub struct StubServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    calls: Arc<AtomicUsize>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(handler: Handler) -> io::Result<Self> {
        Self::bind("127.0.0.1:0", handler)
    }

    pub fn replay(recording: Recording) -> io::Result<Self> {
        Self::start(recording.handler())
    }

    pub fn replay_on(addr: &str, recording: Recording) -> io::Result<Self> {
        Self::bind(addr, recording.handler())
    }

    fn bind(addr: &str, handler: Handler) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let calls = Arc::new(AtomicUsize::new(0));
        let (stop2, calls2) = (stop.clone(), calls.clone());
        let handle = thread::spawn(move || {
            for stream in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                calls2.fetch_add(1, Ordering::SeqCst);
                if let Err(e) = serve(stream, &handler) {
                    log::warn!("stub server: {e}");
                }
            }
        });
        Ok(StubServer { addr, stop, calls, handle: Some(handle) })
    }

    /// Base URL to use as the client `endpoint`.
    pub fn endpoint(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Blocks until the server thread exits (it only does on drop).
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
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

fn serve(stream: TcpStream, handler: &Handler) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line)? == 0 {
        return Ok(());
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.trim().eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let (status, reply) = match serde_json::from_slice::<Value>(&body) {
        Ok(json) => handler(&path, &json),
        Err(e) => (400, json!({"error": {"message": e.to_string()}})),
    };
    let payload = serde_json::to_vec(&reply)?;
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        if status < 400 { "OK" } else { "Error" },
        payload.len()
    )?;
    out.write_all(&payload)?;
    out.flush()
}
