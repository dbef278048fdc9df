//! Chat-completion clients.
//!
//! Two providers sit behind [`ChatProvider`]: an HTTP client for
//! OpenAI-compatible `/v1/chat/completions` endpoints (as exposed by Ollama,
//! vLLM, llama.cpp server and friends) and a scripted provider that replays a
//! fixed queue of responses for tests and offline evaluation.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const DEFAULT_MODEL: &str = "llama3.3:70b";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("LLM endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("LLM endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("LLM call timed out after {0:?}")]
    Timeout(Duration),
    #[error("unexpected LLM response: {0}")]
    InvalidResponse(String),
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("script exhausted after {0} calls")]
    ScriptExhausted(usize),
    #[error("cannot load script: {0}")]
    Script(String),
}

impl LlmError {
    fn is_transient(&self) -> bool {
        match self {
            LlmError::Unreachable(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// One conversation sent to the model.
///
/// `assistant_turns[i]` is the model's reply to `user_turns[i]`; there is
/// always exactly one more user turn than assistant turns, so follow-up
/// prompts carry the earlier exchange as context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user_turns: Vec<String>,
    #[serde(default)]
    pub assistant_turns: Vec<String>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            system: system.into(),
            user_turns: vec![user.into()],
            assistant_turns: Vec::new(),
            temperature: 0.0,
        }
    }

    /// Extends the conversation with the model's last reply and a new user turn.
    pub fn follow_up(&self, reply: impl Into<String>, user: impl Into<String>) -> Self {
        let mut next = self.clone();
        next.assistant_turns.push(reply.into());
        next.user_turns.push(user.into());
        next
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user_turns.is_empty() {
            return Err(LlmError::InvalidRequest("at least one user turn is required".into()));
        }
        if self.assistant_turns.len() + 1 != self.user_turns.len() {
            return Err(LlmError::InvalidRequest(format!(
                "{} user turns but {} assistant turns",
                self.user_turns.len(),
                self.assistant_turns.len()
            )));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn last_user_turn(&self) -> &str {
        self.user_turns.last().map(String::as_str).unwrap_or("")
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut messages = Vec::with_capacity(1 + 2 * self.user_turns.len());
        if !self.system.is_empty() {
            messages.push(ChatMessage { role: Role::System, content: self.system.clone() });
        }
        for (i, user) in self.user_turns.iter().enumerate() {
            messages.push(ChatMessage { role: Role::User, content: user.clone() });
            if let Some(reply) = self.assistant_turns.get(i) {
                messages.push(ChatMessage { role: Role::Assistant, content: reply.clone() });
            }
        }
        messages
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(with = "duration_ms", rename = "latency_ms")]
    pub latency: Duration,
    #[serde(default)]
    pub provider_meta: BTreeMap<String, Value>,
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;

    fn describe(&self) -> String;

    /// Reachability check used by health endpoints.
    fn probe(&self) -> Result<(), LlmError> {
        Ok(())
    }

    /// True when responses depend on call order, so callers must not issue
    /// calls concurrently.
    fn is_order_dependent(&self) -> bool {
        false
    }
}

/// Replays queued responses, one per call.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    queue: Mutex<VecDeque<String>>,
    calls: AtomicUsize,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedProvider {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { queue: Mutex::new(responses.into_iter().map(Into::into).collect()), ..Self::default() }
    }

    /// Loads a JSON array of response strings.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        let responses: Vec<String> =
            serde_json::from_str(&text).map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        Ok(Self::new(responses))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("script queue poisoned").len()
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("request log poisoned").clone()
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        self.requests.lock().expect("request log poisoned").push(request.clone());
        let text =
            self.queue.lock().expect("script queue poisoned").pop_front().ok_or(LlmError::ScriptExhausted(n - 1))?;
        let mut provider_meta = BTreeMap::new();
        provider_meta.insert("provider".into(), json!("scripted"));
        provider_meta.insert("call".into(), json!(n));
        Ok(ChatResponse { text, latency: Duration::ZERO, provider_meta })
    }

    fn describe(&self) -> String {
        "scripted".into()
    }

    fn is_order_dependent(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 2, base_delay: Duration::from_millis(500) }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << attempt.min(16))
    }
}

/// OpenAI-compatible chat-completion endpoint.
///
/// Request body: `{"model", "messages": [{"role", "content"}], "temperature", "stream": false}`.
/// The reply text is read from `choices[0].message.content`, or from
/// `message.content` for Ollama's native `/api/chat`.
pub struct HttpChatProvider {
    endpoint: String,
    api_key: Option<String>,
    timeout: Duration,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl HttpChatProvider {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Unreachable(e.to_string()))?;
        Ok(Self { endpoint: endpoint.into(), api_key: None, timeout, retry: RetryPolicy::default(), client })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key.filter(|k| !k.is_empty());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn attempt(&self, body: &Value) -> Result<ChatResponse, LlmError> {
        let started = Instant::now();
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| self.transport_error(e))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| self.transport_error(e))?;
        if !status.is_success() {
            return Err(LlmError::Status { status: status.as_u16(), body: truncate(&text, 500) });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| LlmError::InvalidResponse(e.to_string()))?;
        let content = value
            .pointer("/choices/0/message/content")
            .or_else(|| value.pointer("/message/content"))
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::InvalidResponse(truncate(&text, 200)))?;
        let mut provider_meta = BTreeMap::new();
        for key in ["model", "id", "usage"] {
            if let Some(v) = value.get(key) {
                provider_meta.insert(key.to_string(), v.clone());
            }
        }
        Ok(ChatResponse { text: content.to_string(), latency: started.elapsed(), provider_meta })
    }

    fn transport_error(&self, err: reqwest::Error) -> LlmError {
        if err.is_timeout() {
            LlmError::Timeout(self.timeout)
        } else {
            LlmError::Unreachable(err.to_string())
        }
    }
}

fn truncate(text: &str, max: usize) -> String {
    match text.char_indices().nth(max) {
        Some((idx, _)) => format!("{}…", &text[..idx]),
        None => text.to_string(),
    }
}

impl ChatProvider for HttpChatProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let body = json!({
            "model": request.model,
            "messages": request.messages(),
            "temperature": request.temperature,
            "stream": false,
        });
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Err(err) if err.is_transient() && attempt < self.retry.max_retries => {
                    log::warn!("LLM call failed ({err}); retry {} of {}", attempt + 1, self.retry.max_retries);
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn describe(&self) -> String {
        self.endpoint.clone()
    }

    fn probe(&self) -> Result<(), LlmError> {
        // Any HTTP answer means the server is up; only transport failures count.
        self.client.get(&self.endpoint).send().map(|_| ()).map_err(|e| self.transport_error(e))
    }
}

/// Counting semaphore bounding concurrent model calls.
#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    active: Mutex<usize>,
    released: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        Self { max: max.max(1), active: Mutex::new(0), released: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().expect("limiter poisoned");
        while *active >= self.max {
            active = self.released.wait(active).expect("limiter poisoned");
        }
        *active += 1;
        Permit { limiter: self }
    }

    pub fn active(&self) -> usize {
        *self.active.lock().expect("limiter poisoned")
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limiter.active.lock().expect("limiter poisoned") -= 1;
        self.limiter.released.notify_one();
    }
}

/// Shared handle used by the pipeline: a provider plus a global in-flight cap.
#[derive(Clone)]
pub struct LlmClient {
    provider: Arc<dyn ChatProvider>,
    limiter: Arc<InFlightLimiter>,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient").field("provider", &self.provider.describe()).finish()
    }
}

impl LlmClient {
    pub fn new(provider: Arc<dyn ChatProvider>, max_in_flight: usize) -> Self {
        Self { provider, limiter: Arc::new(InFlightLimiter::new(max_in_flight)) }
    }

    pub fn scripted(provider: Arc<ScriptedProvider>) -> Self {
        Self::new(provider, 1)
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let _permit = self.limiter.acquire();
        self.provider.complete(request)
    }

    pub fn probe(&self) -> Result<(), LlmError> {
        self.provider.probe()
    }

    pub fn describe(&self) -> String {
        self.provider.describe()
    }

    pub fn is_order_dependent(&self) -> bool {
        self.provider.is_order_dependent()
    }
}
