//! Blocking client for chat-completion style HTTP endpoints.
//!
//! The wire shape is the common `{"model", "messages": [{role, content}],
//! "temperature", "max_tokens"}` request with a `choices[0].message.content`
//! reply. Transport is injected so tests run offline against scripted or
//! replayed exchanges.

use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    fn check(&self) -> Result<(), GatewayError> {
        match self.messages.first() {
            None => Err(GatewayError::InvalidRequest("request has no messages".into())),
            Some(m) if m.role != Role::System => {
                Err(GatewayError::InvalidRequest("first message must be the system prompt".into()))
            }
            Some(_) => Ok(()),
        }
    }

    /// The JSON body sent over the wire. Field order is fixed so recorded
    /// fixtures match byte for byte.
    pub fn to_body(&self) -> String {
        serde_json::to_string(self).expect("chat request serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: String,
    pub usage: Usage,
    /// Transient failures retried before this response arrived.
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedAttempt {
    pub response: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    AuthError(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport error: {0}")]
    TransportError(String),
    #[error("model refused or returned no content: {0}")]
    ModelRefusal(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no valid response after {} attempts", attempts.len())]
    ValidationExhausted { attempts: Vec<FailedAttempt> },
}

/// Raw HTTP reply as seen by the client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
    /// Server-suggested wait in seconds, from `Retry-After`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_after: Option<f64>,
}

/// A connection-level failure (DNS, refused, timeout, reset).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportFailure(pub String);

impl fmt::Display for TransportFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub trait Transport: Send + Sync {
    fn post(&self, url: &str, api_key: &str, body: &str) -> Result<HttpReply, TransportFailure>;
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, duration: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Records requested sleeps without waiting.
#[derive(Default)]
pub struct RecordingSleeper {
    slept: Mutex<Vec<Duration>>,
}

impl RecordingSleeper {
    pub fn sleeps(&self) -> Vec<Duration> {
        self.slept.lock().unwrap().clone()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, duration: Duration) {
        self.slept.lock().unwrap().push(duration);
    }
}

#[cfg(feature = "http")]
pub struct HttpTransport {
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        HttpTransport {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

#[cfg(feature = "http")]
impl Transport for HttpTransport {
    fn post(&self, url: &str, api_key: &str, body: &str) -> Result<HttpReply, TransportFailure> {
        let result = self
            .agent
            .post(url)
            .set("Authorization", &format!("Bearer {api_key}"))
            .set("Content-Type", "application/json")
            .send_string(body);
        let response = match result {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(ureq::Error::Transport(t)) => return Err(TransportFailure(t.to_string())),
        };
        let status = response.status();
        let retry_after = response.header("Retry-After").and_then(|v| v.trim().parse().ok());
        let body = response.into_string().map_err(|e| TransportFailure(e.to_string()))?;
        Ok(HttpReply { status, body, retry_after })
    }
}

/// One recorded request/reply pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: String,
    pub reply: HttpReply,
}

/// Replays recorded exchanges, matching requests byte for byte. Identical
/// requests are answered in recording order.
pub struct ReplayTransport {
    exchanges: Mutex<Vec<Option<Exchange>>>,
}

impl ReplayTransport {
    pub fn new(exchanges: Vec<Exchange>) -> Self {
        ReplayTransport {
            exchanges: Mutex::new(exchanges.into_iter().map(Some).collect()),
        }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let exchanges: Vec<Exchange> =
            serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(ReplayTransport::new(exchanges))
    }

    pub fn remaining(&self) -> usize {
        self.exchanges.lock().unwrap().iter().filter(|e| e.is_some()).count()
    }
}

impl Transport for ReplayTransport {
    fn post(&self, _url: &str, _api_key: &str, body: &str) -> Result<HttpReply, TransportFailure> {
        let mut exchanges = self.exchanges.lock().unwrap();
        let slot = exchanges
            .iter_mut()
            .find(|e| e.as_ref().is_some_and(|x| x.request == body))
            .ok_or_else(|| TransportFailure("no recorded exchange matches this request".into()))?;
        Ok(slot.take().expect("slot checked above").reply)
    }
}

/// Forwards to another transport and keeps every exchange for
/// [`RecordingTransport::save`].
pub struct RecordingTransport {
    inner: Arc<dyn Transport>,
    log: Mutex<Vec<Exchange>>,
    path: PathBuf,
}

impl RecordingTransport {
    pub fn new(inner: Arc<dyn Transport>, path: impl Into<PathBuf>) -> Self {
        RecordingTransport {
            inner,
            log: Mutex::new(Vec::new()),
            path: path.into(),
        }
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.log.lock().unwrap().clone()
    }

    pub fn save(&self) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&self.exchanges()).expect("exchanges serialize");
        std::fs::write(&self.path, text)
    }
}

impl Transport for RecordingTransport {
    fn post(&self, url: &str, api_key: &str, body: &str) -> Result<HttpReply, TransportFailure> {
        let reply = self.inner.post(url, api_key, body)?;
        self.log.lock().unwrap().push(Exchange {
            request: body.to_string(),
            reply: reply.clone(),
        });
        Ok(reply)
    }
}

/// Scripted replies for tests: each call pops the next entry.
pub struct ScriptedTransport {
    script: Mutex<VecDeque<Result<HttpReply, TransportFailure>>>,
    calls: Mutex<Vec<String>>,
}

impl ScriptedTransport {
    pub fn new(script: Vec<Result<HttpReply, TransportFailure>>) -> Self {
        ScriptedTransport {
            script: Mutex::new(script.into()),
            calls: Mutex::new(Vec::new()),
        }
    }

    /// A transport that answers every request with this assistant text.
    pub fn always(content: &str) -> Self {
        let t = ScriptedTransport::new(Vec::new());
        t.script.lock().unwrap().push_back(Ok(ok_reply(content)));
        t
    }

    pub fn requests(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }
}

impl Transport for ScriptedTransport {
    fn post(&self, _url: &str, _api_key: &str, body: &str) -> Result<HttpReply, TransportFailure> {
        self.calls.lock().unwrap().push(body.to_string());
        let mut script = self.script.lock().unwrap();
        match script.len() {
            0 => Err(TransportFailure("script exhausted".into())),
            // the last entry repeats forever
            1 => script.front().cloned().expect("non-empty"),
            _ => script.pop_front().expect("non-empty"),
        }
    }
}

/// A successful completion reply carrying `content`.
pub fn ok_reply(content: &str) -> HttpReply {
    let body = serde_json::json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 0, "completion_tokens": 0}
    });
    HttpReply {
        status: 200,
        body: body.to_string(),
        retry_after: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_attempts: u32,
    pub base_delay_secs: f64,
    pub backoff_factor: f64,
    pub max_in_flight: usize,
    pub timeout_secs: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            temperature: 0.0,
            max_tokens: 4096,
            api_key_env: "OPENAI_API_KEY".into(),
            max_attempts: 5,
            base_delay_secs: 1.0,
            backoff_factor: 2.0,
            max_in_flight: 4,
            timeout_secs: 120.0,
        }
    }
}

/// Counting semaphore capping concurrent requests across threads.
struct InFlightLimiter {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    fn new(max: usize) -> Self {
        InFlightLimiter {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.max {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Outcome of [`ChatClient::complete_with_validation`].
#[derive(Debug, Clone)]
pub struct Validated<T> {
    pub value: T,
    /// Full conversation including every assistant reply and re-prompt.
    pub transcript: Vec<ChatMessage>,
    pub exchanges: usize,
}

#[derive(Clone)]
pub struct ChatClient {
    config: GatewayConfig,
    api_key: Option<String>,
    transport: Arc<dyn Transport>,
    sleeper: Arc<dyn Sleeper>,
    limiter: Arc<InFlightLimiter>,
}

impl fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatClient")
            .field("endpoint", &self.config.endpoint)
            .field("model", &self.config.model)
            .field("has_key", &self.api_key.is_some())
            .finish()
    }
}

impl ChatClient {
    pub fn new(config: GatewayConfig, api_key: Option<String>, transport: Arc<dyn Transport>) -> Self {
        let limiter = Arc::new(InFlightLimiter::new(config.max_in_flight));
        ChatClient {
            config,
            api_key: api_key.filter(|k| !k.is_empty()),
            transport,
            sleeper: Arc::new(ThreadSleeper),
            limiter,
        }
    }

    /// Reads the key from `config.api_key_env`.
    pub fn from_env(config: GatewayConfig, transport: Arc<dyn Transport>) -> Self {
        let key = std::env::var(&config.api_key_env).ok();
        ChatClient::new(config, key, transport)
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model: self.config.model.clone(),
            messages,
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        }
    }

    fn delay_for(&self, retry: u32, hint: Option<f64>) -> Duration {
        let backoff = self.config.base_delay_secs * self.config.backoff_factor.powi(retry as i32);
        let secs = hint.map_or(backoff, |h| h.max(backoff));
        Duration::from_secs_f64(secs.max(0.0))
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = self
            .api_key
            .as_deref()
            .ok_or_else(|| GatewayError::AuthError(format!("{} is not set", self.config.api_key_env)))?;
        request.check()?;
        let body = request.to_body();
        let max_attempts = self.config.max_attempts.max(1);

        let _permit = self.limiter.acquire();
        let mut last_rate_limited = false;
        let mut last_error = String::new();
        for attempt in 0..max_attempts {
            if attempt > 0 {
                log::warn!(
                    "chat completion retry {attempt}/{} after: {last_error}",
                    max_attempts - 1
                );
            }
            let hint = match self.transport.post(&self.config.endpoint, key, &body) {
                Err(failure) => {
                    last_rate_limited = false;
                    last_error = failure.0;
                    None
                }
                Ok(reply) => match reply.status {
                    200..=299 => {
                        let mut response = parse_completion(&reply.body)?;
                        response.retries = attempt;
                        return Ok(response);
                    }
                    401 | 403 => return Err(GatewayError::AuthError(format!("HTTP {}", reply.status))),
                    429 => {
                        last_rate_limited = true;
                        last_error = "HTTP 429".into();
                        reply.retry_after
                    }
                    408 | 500..=599 => {
                        last_rate_limited = false;
                        last_error = format!("HTTP {}", reply.status);
                        reply.retry_after
                    }
                    status => {
                        return Err(GatewayError::TransportError(format!(
                            "HTTP {status}: {}",
                            truncate(&reply.body, 200)
                        )))
                    }
                },
            };
            if attempt + 1 < max_attempts {
                self.sleeper.sleep(self.delay_for(attempt, hint));
            }
        }
        if last_rate_limited {
            Err(GatewayError::RateLimited { attempts: max_attempts })
        } else {
            Err(GatewayError::TransportError(last_error))
        }
    }

    /// Sends `request`; when `validator` rejects the reply, appends the reply
    /// and the rejection reason to the conversation and asks again, at most
    /// `retries` more times.
    pub fn complete_with_validation<T, F>(
        &self,
        request: &ChatRequest,
        validator: F,
        retries: u32,
    ) -> Result<Validated<T>, GatewayError>
    where
        F: Fn(&str) -> Result<T, String>,
    {
        let mut req = request.clone();
        let mut failures = Vec::new();
        for exchange in 0..=retries {
            let response = self.complete(&req)?;
            match validator(&response.content) {
                Ok(value) => {
                    req.messages.push(ChatMessage::assistant(response.content));
                    return Ok(Validated {
                        value,
                        transcript: req.messages,
                        exchanges: exchange as usize + 1,
                    });
                }
                Err(error) => {
                    log::info!("model reply rejected ({error}); re-prompting");
                    req.messages.push(ChatMessage::assistant(response.content.clone()));
                    req.messages.push(ChatMessage::user(format!(
                        "Your previous answer could not be used: {error}\n\
                         Reply again with the complete answer in exactly the required format."
                    )));
                    failures.push(FailedAttempt {
                        response: response.content,
                        error,
                    });
                }
            }
        }
        Err(GatewayError::ValidationExhausted { attempts: failures })
    }
}

fn truncate(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

fn parse_completion(body: &str) -> Result<ChatResponse, GatewayError> {
    let wire: WireResponse = serde_json::from_str(body)
        .map_err(|e| GatewayError::TransportError(format!("unreadable completion body: {e}")))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::ModelRefusal("no choices returned".into()))?;
    let finish_reason = choice.finish_reason.unwrap_or_default();
    let content = choice.message.content.unwrap_or_default();
    if finish_reason == "content_filter" || content.trim().is_empty() {
        return Err(GatewayError::ModelRefusal(format!("finish_reason={finish_reason:?}")));
    }
    Ok(ChatResponse {
        content,
        finish_reason,
        usage: wire.usage.unwrap_or_default(),
        retries: 0,
    })
}
