//! In-process completion/embedding server for tests, demos and offline runs.
//!
//! Speaks the same wire contract as [`crate::gateway::HttpEndpoint`] under
//! `/v1`. Runs on a loopback port chosen by the OS and stops when dropped.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{json, Value};
use tiny_http::{Header, Request, Response, Server};

use crate::claims::format_claim;
use crate::cohort::Corpus;
use crate::retrieval::HashingEmbedder;

/// How completion requests are answered.
#[derive(Debug, Clone)]
pub enum Reply {
    /// Returns the claim paired with the longest note found verbatim in the
    /// prompt, or an empty string when none matches.
    Echo(Vec<(String, String)>),
    Fixed(String),
}

impl Reply {
    /// Echo the ground-truth claim text of every encounter in `corpus`.
    pub fn echo_corpus(corpus: &Corpus) -> Self {
        Reply::Echo(
            corpus
                .encounters()
                .iter()
                .map(|e| (e.note.clone(), format_claim(&e.claim)))
                .collect(),
        )
    }

    fn answer(&self, prompt: &str) -> String {
        match self {
            Reply::Fixed(text) => text.clone(),
            Reply::Echo(pairs) => pairs
                .iter()
                .filter(|(note, _)| !note.is_empty() && prompt.contains(note.as_str()))
                .max_by_key(|(note, _)| note.len())
                .map(|(_, claim)| claim.clone())
                .unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StubConfig {
    pub reply: Reply,
    pub embedding_dim: usize,
    /// When set, requests without `Authorization: Bearer <token>` get 401.
    pub required_token: Option<String>,
    /// Sleep before answering any request.
    pub delay: Duration,
    /// Statuses returned, in order, to the first completion requests before
    /// normal replies resume.
    pub scripted_statuses: Vec<u16>,
    /// Completion prompts containing any of these substrings always get
    /// `failing_status`.
    pub failing_markers: Vec<String>,
    pub failing_status: u16,
}

impl StubConfig {
    pub fn new(reply: Reply) -> Self {
        StubConfig {
            reply,
            embedding_dim: crate::retrieval::DEFAULT_DIM,
            required_token: None,
            delay: Duration::ZERO,
            scripted_statuses: Vec::new(),
            failing_markers: Vec::new(),
            failing_status: 400,
        }
    }
}

#[derive(Debug, Default)]
struct Shared {
    completion_requests: Mutex<Vec<Value>>,
    auth_headers: Mutex<Vec<Option<String>>>,
    script_pos: AtomicUsize,
}

pub struct StubServer {
    server: Arc<Server>,
    base_url: String,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(config: StubConfig) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0", config)
    }

    pub fn bind(addr: &str, config: StubConfig) -> std::io::Result<Self> {
        let server = Arc::new(Server::http(addr).map_err(std::io::Error::other)?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("stub is not bound to an IP address"))?;
        let shared = Arc::new(Shared::default());
        let config = Arc::new(config);
        let acceptor = {
            let (server, shared) = (server.clone(), shared.clone());
            thread::spawn(move || {
                for request in server.incoming_requests() {
                    let (config, shared) = (config.clone(), shared.clone());
                    thread::spawn(move || handle(request, &config, &shared));
                }
            })
        };
        Ok(StubServer {
            server,
            base_url: format!("http://{addr}/v1"),
            shared,
            acceptor: Some(acceptor),
        })
    }

    /// Base URL to hand to an endpoint config, ending in `/v1`.
    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// Bodies of completion requests received so far, in arrival order.
    pub fn completion_requests(&self) -> Vec<Value> {
        self.shared.completion_requests.lock().unwrap().clone()
    }

    /// `Authorization` header of every request received so far.
    pub fn auth_headers(&self) -> Vec<Option<String>> {
        self.shared.auth_headers.lock().unwrap().clone()
    }

    /// Blocks until interrupted; for the CLI.
    pub fn wait(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

fn respond(request: Request, status: u16, body: Value) {
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let response = Response::from_string(body.to_string())
        .with_status_code(status)
        .with_header(header);
    let _ = request.respond(response);
}

fn handle(mut request: Request, config: &StubConfig, shared: &Shared) {
    let auth = request
        .headers()
        .iter()
        .find(|h| h.field.equiv("Authorization"))
        .map(|h| h.value.as_str().to_string());
    shared.auth_headers.lock().unwrap().push(auth.clone());
    let mut raw = String::new();
    if request.as_reader().read_to_string(&mut raw).is_err() {
        return respond(request, 400, json!({"error": "unreadable body"}));
    }
    if !config.delay.is_zero() {
        thread::sleep(config.delay);
    }
    if let Some(token) = &config.required_token {
        if auth.as_deref() != Some(format!("Bearer {token}").as_str()) {
            return respond(request, 401, json!({"error": "unauthorized"}));
        }
    }
    let body: Value = match serde_json::from_str(&raw) {
        Ok(v) => v,
        Err(e) => return respond(request, 400, json!({"error": e.to_string()})),
    };
    let path = request.url().split('?').next().unwrap_or("").trim_end_matches('/').to_string();
    match path.as_str() {
        "/v1/completions" => completion(request, body, config, shared),
        "/v1/embeddings" => embedding(request, &body, config),
        _ => respond(request, 404, json!({"error": "not found"})),
    }
}

fn completion(request: Request, body: Value, config: &StubConfig, shared: &Shared) {
    let prompt = body.get("prompt").and_then(Value::as_str).unwrap_or("").to_string();
    shared.completion_requests.lock().unwrap().push(body);
    let pos = shared.script_pos.fetch_add(1, Ordering::SeqCst);
    if let Some(&status) = config.scripted_statuses.get(pos) {
        return respond(request, status, json!({"error": "scripted"}));
    }
    if config.failing_markers.iter().any(|m| prompt.contains(m.as_str())) {
        return respond(request, config.failing_status, json!({"error": "rejected"}));
    }
    let text = config.reply.answer(&prompt);
    respond(
        request,
        200,
        json!({"object": "text_completion", "choices": [{"index": 0, "text": text, "finish_reason": "stop"}]}),
    );
}

fn embedding(request: Request, body: &Value, config: &StubConfig) {
    let inputs: Vec<&str> = match body.get("input") {
        Some(Value::String(s)) => vec![s.as_str()],
        Some(Value::Array(items)) => items.iter().filter_map(Value::as_str).collect(),
        _ => return respond(request, 400, json!({"error": "missing input"})),
    };
    let embedder = HashingEmbedder::new(config.embedding_dim);
    let data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .map(|(i, text)| json!({"index": i, "embedding": embedder.embed(text)}))
        .collect();
    respond(request, 200, json!({"object": "list", "data": data}));
}
