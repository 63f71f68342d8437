//! Uniform client layer for remote model endpoints.
//!
//! Every role (generator, editor, verifier, judge, aesthetic scorer, face
//! embedder) speaks one of two wire shapes: an OpenAI-compatible chat
//! completion, or a single-POST image edit. The [`Transport`] trait
//! abstracts the wire so tests bind the deterministic in-process
//! [`mock::MockTransport`] instead of HTTP.
//!
//! Retries, exponential backoff, per-endpoint rate limiting, and the
//! in-flight cap all live in [`Endpoint`], above the transport, so the
//! mock exercises the same code paths as production.

pub mod mock;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::ImageRef;
use crate::store::ArtifactStore;

/// Connection and discipline settings for one remote endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Name of the environment variable holding the API key; secrets are
    /// never stored in config files.
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub model_name: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_s: f64,
    /// Requests per second; 0 disables pacing.
    #[serde(default)]
    pub rate_limit: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff() -> f64 {
    1.0
}
fn default_in_flight() -> usize {
    8
}
fn default_max_tokens() -> u32 {
    2048
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.timeout_s <= 0.0 || self.backoff_base_s <= 0.0 || self.max_in_flight == 0 {
            return Err(GatewayError::Config(
                "timeout, backoff_base and max_in_flight must be positive".to_string(),
            ));
        }
        Ok(())
    }

    pub fn api_key(&self) -> Option<String> {
        self.api_key_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
    }
}

/// One part of a chat message: text, or an image by reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Part {
    Text { text: String },
    Image { image: ImageRef, media_type: String },
}

/// A chat completion request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: Option<String>,
    pub parts: Vec<Part>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn text_only(system: Option<&str>, text: &str) -> ChatRequest {
        ChatRequest {
            system: system.map(str::to_string),
            parts: vec![Part::Text {
                text: text.to_string(),
            }],
            temperature: 0.0,
            max_tokens: default_max_tokens(),
        }
    }

    /// Concatenated text of all text parts (used for digests and by the
    /// mock's reply hooks).
    pub fn joined_text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text { text } => Some(text.as_str()),
                Part::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// A request to an image-editing endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditRequest {
    pub source: ImageRef,
    pub instruction: String,
    pub seed: Option<u64>,
}

/// Wire-level call, after request shaping.
#[derive(Debug, Clone)]
pub enum WireCall {
    /// OpenAI-style chat completion body.
    Chat { body: serde_json::Value, digest: String },
    /// Image edit: base64 source plus prompt.
    Edit {
        image_b64: String,
        prompt: String,
        seed: Option<u64>,
        digest: String,
    },
}

impl WireCall {
    pub fn digest(&self) -> &str {
        match self {
            WireCall::Chat { digest, .. } | WireCall::Edit { digest, .. } => digest,
        }
    }
}

#[derive(Debug, Clone)]
pub enum WireReply {
    /// Full completion body (OpenAI shape) as text.
    Body(String),
    /// Raw image bytes.
    Image(Vec<u8>),
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum TransportError {
    #[error("http status {code}")]
    Status { code: u16, body: String },
    #[error("timeout")]
    Timeout,
    #[error("network: {0}")]
    Network(String),
}

impl TransportError {
    /// 429 and 5xx are transient; other statuses are caller errors.
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Status { code, .. } => *code == 429 || *code >= 500,
            TransportError::Timeout | TransportError::Network(_) => true,
        }
    }
}

/// The wire. Implementations must be safe for concurrent use.
pub trait Transport: Send + Sync {
    fn send(&self, call: &WireCall) -> Result<WireReply, TransportError>;
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("exhausted after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("bad request (status {status}): {body}")]
    BadRequest { status: u16, body: String },
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("no JSON object found in reply")]
    NoJsonFound,
    #[error("decode failure: {0}")]
    DecodeFailure(String),
    #[error("config: {0}")]
    Config(String),
    #[error("store: {0}")]
    Store(#[from] std::io::Error),
}

/// Counting semaphore; std has no ready-made one.
struct Semaphore {
    count: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Semaphore {
        Semaphore {
            count: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut count = self.count.lock().unwrap();
        while *count == 0 {
            count = self.cv.wait(count).unwrap();
        }
        *count -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut count = self.sem.count.lock().unwrap();
        *count += 1;
        self.sem.cv.notify_one();
    }
}

/// Per-request retry telemetry, kept for assertions and audits.
#[derive(Debug, Clone)]
pub struct RetryRecord {
    pub digest: String,
    pub attempts: u32,
    /// Backoff delays slept before attempts 2..n, in seconds.
    pub delays_s: Vec<f64>,
}

/// A configured endpoint bound to a transport. Cloneable handle; all
/// clones share the rate limiter, in-flight cap, and telemetry.
#[derive(Clone)]
pub struct Endpoint {
    cfg: EndpointConfig,
    transport: Arc<dyn Transport>,
    slots: Arc<Semaphore>,
    /// Next permitted send time, in nanos since `epoch`.
    next_send: Arc<AtomicU64>,
    epoch: Instant,
    retry_log: Arc<Mutex<Vec<RetryRecord>>>,
}

impl Endpoint {
    pub fn new(cfg: EndpointConfig, transport: Arc<dyn Transport>) -> Result<Endpoint, GatewayError> {
        cfg.validate()?;
        let slots = Arc::new(Semaphore::new(cfg.max_in_flight));
        Ok(Endpoint {
            cfg,
            transport,
            slots,
            next_send: Arc::new(AtomicU64::new(0)),
            epoch: Instant::now(),
            retry_log: Arc::new(Mutex::new(Vec::new())),
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn retry_log(&self) -> Vec<RetryRecord> {
        self.retry_log.lock().unwrap().clone()
    }

    /// Token-bucket pacing at `rate_limit` requests per second.
    fn pace(&self) {
        if self.cfg.rate_limit <= 0.0 {
            return;
        }
        let interval_ns = (1e9 / self.cfg.rate_limit) as u64;
        loop {
            let now_ns = self.epoch.elapsed().as_nanos() as u64;
            let slot = self.next_send.load(Ordering::SeqCst);
            let start = slot.max(now_ns);
            if self
                .next_send
                .compare_exchange(slot, start + interval_ns, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
            {
                if start > now_ns {
                    std::thread::sleep(Duration::from_nanos(start - now_ns));
                }
                return;
            }
        }
    }

    /// Retry loop: up to max_retries + 1 attempts, exponential backoff on
    /// transient failures, no retry on non-429 4xx.
    fn call(&self, call: &WireCall) -> Result<WireReply, GatewayError> {
        let mut delays = Vec::new();
        let mut last = String::new();
        let total = self.cfg.max_retries + 1;
        for attempt in 0..total {
            if attempt > 0 {
                let delay = self.cfg.backoff_base_s * 2f64.powi(attempt as i32 - 1);
                delays.push(delay);
                std::thread::sleep(Duration::from_secs_f64(delay));
            }
            self.pace();
            let _permit = self.slots.acquire();
            match self.transport.send(call) {
                Ok(reply) => {
                    self.retry_log.lock().unwrap().push(RetryRecord {
                        digest: call.digest().to_string(),
                        attempts: attempt + 1,
                        delays_s: delays,
                    });
                    return Ok(reply);
                }
                Err(e) if e.is_transient() => {
                    last = e.to_string();
                }
                Err(TransportError::Status { code, body }) => {
                    self.retry_log.lock().unwrap().push(RetryRecord {
                        digest: call.digest().to_string(),
                        attempts: attempt + 1,
                        delays_s: delays,
                    });
                    return Err(GatewayError::BadRequest { status: code, body });
                }
                Err(e) => {
                    last = e.to_string();
                }
            }
        }
        self.retry_log.lock().unwrap().push(RetryRecord {
            digest: call.digest().to_string(),
            attempts: total,
            delays_s: delays,
        });
        Err(GatewayError::Exhausted {
            attempts: total,
            last,
        })
    }

    /// Send a chat request and return the first completion's text.
    pub fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let digest = chat_digest(req);
        let body = openai_body(&self.cfg, req);
        let reply = self.call(&WireCall::Chat { body, digest })?;
        match reply {
            WireReply::Body(text) => {
                let v: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| GatewayError::MalformedReply(e.to_string()))?;
                v["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| {
                        GatewayError::MalformedReply("missing choices[0].message.content".into())
                    })
            }
            WireReply::Image(_) => Err(GatewayError::MalformedReply(
                "image reply to chat call".into(),
            )),
        }
    }

    /// Send an edit request, persist the returned image in the artifact
    /// store, and return its reference.
    pub fn edit_image(
        &self,
        req: &EditRequest,
        store: &ArtifactStore,
    ) -> Result<ImageRef, GatewayError> {
        let source_bytes = store.read_uri(&req.source.uri)?;
        use base64::Engine as _;
        let image_b64 = base64::engine::general_purpose::STANDARD.encode(&source_bytes);
        let digest = edit_digest(req);
        let reply = self.call(&WireCall::Edit {
            image_b64,
            prompt: req.instruction.clone(),
            seed: req.seed,
            digest,
        })?;
        let bytes = match reply {
            WireReply::Image(b) => b,
            WireReply::Body(text) => {
                // tolerate JSON {"image": "<b64>"} bodies
                let v: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| GatewayError::MalformedReply(e.to_string()))?;
                let b64 = v["image"]
                    .as_str()
                    .ok_or_else(|| GatewayError::MalformedReply("missing image field".into()))?;
                base64::engine::general_purpose::STANDARD
                    .decode(b64)
                    .map_err(|e| GatewayError::DecodeFailure(e.to_string()))?
            }
        };
        let img = crate::imaging::GrayImage::decode(&bytes)
            .map_err(|e| GatewayError::DecodeFailure(e.to_string()))?;
        let (path, hash) = store.put(&bytes, "png")?;
        Ok(ImageRef {
            uri: path.to_string_lossy().to_string(),
            width: img.width as u32,
            height: img.height as u32,
            content_hash: hash,
        })
    }
}

/// Stable digest of a chat request, used as the mock's fixture key.
pub fn chat_digest(req: &ChatRequest) -> String {
    let mut h = Sha256::new();
    h.update(b"chat\0");
    if let Some(s) = &req.system {
        h.update(s.as_bytes());
    }
    h.update(b"\0");
    for p in &req.parts {
        match p {
            Part::Text { text } => {
                h.update(b"t:");
                h.update(text.as_bytes());
            }
            Part::Image { image, .. } => {
                h.update(b"i:");
                h.update(image.content_hash.as_bytes());
            }
        }
        h.update(b"\0");
    }
    hex::encode(h.finalize())
}

/// Stable digest of an edit request.
pub fn edit_digest(req: &EditRequest) -> String {
    let mut h = Sha256::new();
    h.update(b"edit\0");
    h.update(req.source.content_hash.as_bytes());
    h.update(b"\0");
    h.update(req.instruction.as_bytes());
    h.update(b"\0");
    if let Some(s) = req.seed {
        h.update(s.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Shape a chat request into an OpenAI-compatible completion body. Images
/// travel as base64 data URIs unless the reference is already a URL.
fn openai_body(cfg: &EndpointConfig, req: &ChatRequest) -> serde_json::Value {
    let mut messages = Vec::new();
    if let Some(system) = &req.system {
        messages.push(serde_json::json!({"role": "system", "content": system}));
    }
    let content: Vec<serde_json::Value> = req
        .parts
        .iter()
        .map(|p| match p {
            Part::Text { text } => serde_json::json!({"type": "text", "text": text}),
            Part::Image { image, media_type } => {
                let url = if image.uri.starts_with("http://") || image.uri.starts_with("https://")
                {
                    image.uri.clone()
                } else {
                    match std::fs::read(&image.uri) {
                        Ok(bytes) => {
                            use base64::Engine as _;
                            format!(
                                "data:{};base64,{}",
                                media_type,
                                base64::engine::general_purpose::STANDARD.encode(bytes)
                            )
                        }
                        Err(_) => image.uri.clone(),
                    }
                };
                serde_json::json!({"type": "image_url", "image_url": {"url": url}})
            }
        })
        .collect();
    messages.push(serde_json::json!({"role": "user", "content": content}));
    serde_json::json!({
        "model": cfg.model_name,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    })
}

/// HTTP transport speaking the OpenAI chat-completions shape and the
/// single-POST edit shape.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &EndpointConfig) -> Result<HttpTransport, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_s))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(HttpTransport {
            client,
            base_url: cfg.base_url.trim_end_matches('/').to_string(),
            api_key: cfg.api_key(),
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, call: &WireCall) -> Result<WireReply, TransportError> {
        let (url, body) = match call {
            WireCall::Chat { body, .. } => {
                (format!("{}/chat/completions", self.base_url), body.clone())
            }
            WireCall::Edit {
                image_b64,
                prompt,
                seed,
                ..
            } => (
                format!("{}/edits", self.base_url),
                serde_json::json!({"image": image_b64, "prompt": prompt, "seed": seed}),
            ),
        };
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Network(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let is_image = resp
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .map(|v| v.starts_with("image/"))
            .unwrap_or(false);
        if status >= 400 {
            let body = resp.text().unwrap_or_default();
            return Err(TransportError::Status { code: status, body });
        }
        if is_image {
            let bytes = resp
                .bytes()
                .map_err(|e| TransportError::Network(e.to_string()))?;
            Ok(WireReply::Image(bytes.to_vec()))
        } else {
            let text = resp
                .text()
                .map_err(|e| TransportError::Network(e.to_string()))?;
            Ok(WireReply::Body(text))
        }
    }
}

/// Locate the first well-formed JSON object in `reply`, tolerating
/// surrounding prose and triple-backtick fences. First object wins.
pub fn extract_json_object(reply: &str) -> Result<serde_json::Value, GatewayError> {
    let bytes = reply.as_bytes();
    let mut start = 0;
    while let Some(open) = reply[start..].find('{').map(|i| i + start) {
        // balanced-brace scan, string-aware
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (i, &b) in bytes[open..].iter().enumerate() {
            if in_string {
                if escaped {
                    escaped = false;
                } else if b == b'\\' {
                    escaped = true;
                } else if b == b'"' {
                    in_string = false;
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        let candidate = &reply[open..=open + i];
                        if let Ok(v) = serde_json::from_str::<serde_json::Value>(candidate) {
                            if v.is_object() {
                                return Ok(v);
                            }
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
        start = open + 1;
    }
    Err(GatewayError::NoJsonFound)
}
