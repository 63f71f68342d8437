//! Deterministic in-process endpoint used by tests and `--mock` runs.
//!
//! Replies resolve in order: scripted outcome queue, exact digest
//! fixtures, the programmable reply hook, then a deterministic default
//! derived from the request digest. All traffic is recorded, and the
//! concurrent in-flight high-water mark is tracked so tests can assert
//! the gateway's cap.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{Transport, TransportError, WireCall, WireReply};
use crate::imaging::GrayImage;

/// One scripted outcome, consumed in FIFO order ahead of normal
/// resolution.
#[derive(Debug, Clone)]
pub enum MockStep {
    /// Fail with this HTTP status.
    Status(u16),
    /// Time out.
    Timeout,
    /// Succeed via normal reply resolution.
    Ok,
    /// Succeed with this raw (unwrapped) completion body.
    RawBody(String),
}

/// How the mock answers edit calls.
#[derive(Clone)]
pub enum MockEditMode {
    /// Return the source image unchanged.
    Identity,
    /// Invert luminance; applying it twice restores the input.
    InvertLuminance,
    /// Fail every edit with this status.
    Fail(u16),
    /// Fail edits whose prompt contains any of these fragments; identity
    /// otherwise.
    FailMatching(Vec<String>),
}

/// A recorded wire call.
#[derive(Debug, Clone)]
pub struct CallRecord {
    pub digest: String,
    pub kind: &'static str,
    /// Chat calls: the user text joined from the body. Edit calls: the
    /// prompt.
    pub text: String,
}

type ChatHook = Arc<dyn Fn(&ChatCallView) -> Option<String> + Send + Sync>;

/// What a chat hook sees: the shaped request, decoded from the wire body.
#[derive(Debug, Clone)]
pub struct ChatCallView {
    pub system: Option<String>,
    pub user_text: String,
    pub image_count: usize,
    pub digest: String,
}

#[derive(Default)]
struct MockState {
    replies: HashMap<String, String>,
    script: VecDeque<MockStep>,
}

/// The deterministic mock transport.
pub struct MockTransport {
    state: Mutex<MockState>,
    chat_hook: Mutex<Option<ChatHook>>,
    edit_mode: Mutex<MockEditMode>,
    log: Mutex<Vec<CallRecord>>,
    latency: Mutex<Duration>,
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
}

impl Default for MockTransport {
    fn default() -> Self {
        MockTransport {
            state: Mutex::new(MockState::default()),
            chat_hook: Mutex::new(None),
            edit_mode: Mutex::new(MockEditMode::Identity),
            log: Mutex::new(Vec::new()),
            latency: Mutex::new(Duration::ZERO),
            in_flight: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
        }
    }
}

impl MockTransport {
    pub fn new() -> Arc<MockTransport> {
        Arc::new(MockTransport::default())
    }

    /// Bind canned replies keyed by request digest.
    pub fn bind(&self, behaviors: HashMap<String, String>) {
        self.state.lock().unwrap().replies.extend(behaviors);
    }

    pub fn bind_one(&self, digest: &str, reply: &str) {
        self.state
            .lock()
            .unwrap()
            .replies
            .insert(digest.to_string(), reply.to_string());
    }

    /// Queue scripted outcomes consumed before normal resolution.
    pub fn push_script(&self, steps: impl IntoIterator<Item = MockStep>) {
        self.state.lock().unwrap().script.extend(steps);
    }

    /// Install a programmable chat reply hook.
    pub fn set_chat_hook(
        &self,
        hook: impl Fn(&ChatCallView) -> Option<String> + Send + Sync + 'static,
    ) {
        *self.chat_hook.lock().unwrap() = Some(Arc::new(hook));
    }

    pub fn set_edit_mode(&self, mode: MockEditMode) {
        *self.edit_mode.lock().unwrap() = mode;
    }

    /// Artificial per-call latency, for concurrency tests.
    pub fn set_latency(&self, latency: Duration) {
        *self.latency.lock().unwrap() = latency;
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    /// Highest number of concurrently outstanding calls observed.
    pub fn high_water_mark(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }

    /// Deterministic default reply for an unmatched digest.
    pub fn default_reply(digest: &str) -> String {
        format!("mock-reply-{}", &digest[..16.min(digest.len())])
    }

    fn view_of(body: &serde_json::Value, digest: &str) -> ChatCallView {
        let mut system = None;
        let mut user_text = Vec::new();
        let mut image_count = 0;
        if let Some(messages) = body["messages"].as_array() {
            for m in messages {
                match m["role"].as_str() {
                    Some("system") => system = m["content"].as_str().map(str::to_string),
                    _ => {
                        if let Some(parts) = m["content"].as_array() {
                            for p in parts {
                                match p["type"].as_str() {
                                    Some("text") => {
                                        if let Some(t) = p["text"].as_str() {
                                            user_text.push(t.to_string());
                                        }
                                    }
                                    Some("image_url") => image_count += 1,
                                    _ => {}
                                }
                            }
                        }
                    }
                }
            }
        }
        ChatCallView {
            system,
            user_text: user_text.join("\n"),
            image_count,
            digest: digest.to_string(),
        }
    }

    fn wrap_content(content: &str) -> WireReply {
        WireReply::Body(
            serde_json::json!({"choices": [{"message": {"content": content}}]}).to_string(),
        )
    }

    fn answer_chat(&self, body: &serde_json::Value, digest: &str) -> WireReply {
        if let Some(reply) = self.state.lock().unwrap().replies.get(digest) {
            return Self::wrap_content(reply);
        }
        let hook = self.chat_hook.lock().unwrap().clone();
        if let Some(hook) = hook {
            let view = Self::view_of(body, digest);
            if let Some(reply) = hook(&view) {
                return Self::wrap_content(&reply);
            }
        }
        Self::wrap_content(&Self::default_reply(digest))
    }

    fn answer_edit(&self, image_b64: &str, prompt: &str) -> Result<WireReply, TransportError> {
        use base64::Engine as _;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(image_b64)
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let mode = self.edit_mode.lock().unwrap().clone();
        match mode {
            MockEditMode::Identity => Ok(WireReply::Image(bytes)),
            MockEditMode::InvertLuminance => {
                let img = GrayImage::decode(&bytes)
                    .map_err(|e| TransportError::Network(e.to_string()))?;
                let inverted = GrayImage::new(
                    img.width,
                    img.height,
                    img.pixels.iter().map(|p| 1.0 - p).collect(),
                )
                .expect("inverted image valid");
                Ok(WireReply::Image(inverted.encode_png().map_err(|e| {
                    TransportError::Network(e.to_string())
                })?))
            }
            MockEditMode::Fail(code) => Err(TransportError::Status {
                code,
                body: "mock edit failure".to_string(),
            }),
            MockEditMode::FailMatching(fragments) => {
                if fragments.iter().any(|f| prompt.contains(f)) {
                    Err(TransportError::Status {
                        code: 500,
                        body: "mock edit failure".to_string(),
                    })
                } else {
                    Ok(WireReply::Image(bytes))
                }
            }
        }
    }
}

impl Transport for MockTransport {
    fn send(&self, call: &WireCall) -> Result<WireReply, TransportError> {
        let current = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.high_water.fetch_max(current, Ordering::SeqCst);
        let latency = *self.latency.lock().unwrap();
        if !latency.is_zero() {
            std::thread::sleep(latency);
        }

        let result = (|| {
            let step = self.state.lock().unwrap().script.pop_front();
            match step {
                Some(MockStep::Status(code)) => {
                    return Err(TransportError::Status {
                        code,
                        body: "scripted".to_string(),
                    })
                }
                Some(MockStep::Timeout) => return Err(TransportError::Timeout),
                Some(MockStep::RawBody(body)) => return Ok(WireReply::Body(body)),
                Some(MockStep::Ok) | None => {}
            }
            match call {
                WireCall::Chat { body, digest } => Ok(self.answer_chat(body, digest)),
                WireCall::Edit {
                    image_b64, prompt, ..
                } => self.answer_edit(image_b64, prompt),
            }
        })();

        let (kind, text) = match call {
            WireCall::Chat { body, digest } => {
                ("chat", Self::view_of(body, digest).user_text)
            }
            WireCall::Edit { prompt, .. } => ("edit", prompt.clone()),
        };
        self.log.lock().unwrap().push(CallRecord {
            digest: call.digest().to_string(),
            kind,
            text,
        });
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

/// Build an endpoint config suitable for mock binding: tiny backoff, high
/// rate limit.
pub fn mock_endpoint_config(max_in_flight: usize) -> super::EndpointConfig {
    super::EndpointConfig {
        base_url: "mock://".to_string(),
        api_key_env: None,
        model_name: "mock".to_string(),
        timeout_s: 5.0,
        max_retries: 3,
        backoff_base_s: 0.001,
        rate_limit: 0.0,
        max_in_flight,
        temperature: 0.0,
        max_tokens: 2048,
    }
}
