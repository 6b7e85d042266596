//! Policy backends: a scripted one for tests and fixtures, and an HTTP chat client.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ChatTurn, Role};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend transport failure: {0}")]
    Transport(String),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("backend response could not be decoded: {0}")]
    Decode(String),
    #[error("scripted backend has no response left (call {0})")]
    ScriptExhausted(usize),
    #[error("scripted backend context check failed at call {call}: {reason}")]
    ContextMismatch { call: usize, reason: String },
    #[error("history is empty")]
    EmptyHistory,
    #[error("missing credential: environment variable `{0}` is not set")]
    MissingCredential(String),
    #[error("{0}")]
    Scripted(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// A model that continues a chat history. Generation halts at the first
/// stop sequence, which is kept at the end of the returned text.
pub trait PolicyBackend: Send + Sync {
    fn complete(&self, history: &[ChatTurn], stop: &[&str]) -> Result<String, BackendError>;
}

impl<T: PolicyBackend + ?Sized> PolicyBackend for Arc<T> {
    fn complete(&self, history: &[ChatTurn], stop: &[&str]) -> Result<String, BackendError> {
        (**self).complete(history, stop)
    }
}

impl<T: PolicyBackend + ?Sized> PolicyBackend for Box<T> {
    fn complete(&self, history: &[ChatTurn], stop: &[&str]) -> Result<String, BackendError> {
        (**self).complete(history, stop)
    }
}

/// Cuts `text` right after the earliest occurrence of any stop sequence.
pub fn truncate_at_stop<'a>(text: &'a str, stop: &[&str]) -> &'a str {
    stop.iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s).map(|i| i + s.len()))
        .min()
        .map_or(text, |end| &text[..end])
}

pub type HistoryCheck = Arc<dyn Fn(&[ChatTurn]) -> Result<(), String> + Send + Sync>;

/// Check applied to the history a scripted response is served against.
#[derive(Clone)]
pub enum ContextPredicate {
    Any,
    LastTurnContains(String),
    HistoryLen(usize),
    Custom(HistoryCheck),
}

impl std::fmt::Debug for ContextPredicate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ContextPredicate::Any => write!(f, "Any"),
            ContextPredicate::LastTurnContains(s) => write!(f, "LastTurnContains({s:?})"),
            ContextPredicate::HistoryLen(n) => write!(f, "HistoryLen({n})"),
            ContextPredicate::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl ContextPredicate {
    fn check(&self, history: &[ChatTurn]) -> Result<(), String> {
        match self {
            ContextPredicate::Any => Ok(()),
            ContextPredicate::LastTurnContains(needle) => {
                let last = history.last().map(|t| t.content.as_str()).unwrap_or("");
                if last.contains(needle.as_str()) {
                    Ok(())
                } else {
                    Err(format!("last turn does not contain {needle:?}"))
                }
            }
            ContextPredicate::HistoryLen(n) if history.len() == *n => Ok(()),
            ContextPredicate::HistoryLen(n) => Err(format!("expected {n} turns, got {}", history.len())),
            ContextPredicate::Custom(f) => f(history),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptEntry {
    pub predicate: ContextPredicate,
    /// `Err` simulates a backend failure with that message.
    pub response: Result<String, String>,
}

impl ScriptEntry {
    pub fn reply(text: impl Into<String>) -> Self {
        ScriptEntry { predicate: ContextPredicate::Any, response: Ok(text.into()) }
    }

    pub fn fail(message: impl Into<String>) -> Self {
        ScriptEntry { predicate: ContextPredicate::Any, response: Err(message.into()) }
    }

    pub fn expecting(mut self, predicate: ContextPredicate) -> Self {
        self.predicate = predicate;
        self
    }
}

/// Replays a fixed sequence of responses, one per call.
#[derive(Debug)]
pub struct ScriptedBackend {
    entries: Vec<ScriptEntry>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        ScriptedBackend { entries, cursor: Mutex::new(0) }
    }

    pub fn from_replies<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(replies.into_iter().map(ScriptEntry::reply).collect())
    }

    pub fn calls(&self) -> usize {
        *self.cursor.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.calls()
    }
}

impl PolicyBackend for ScriptedBackend {
    fn complete(&self, history: &[ChatTurn], stop: &[&str]) -> Result<String, BackendError> {
        if history.is_empty() {
            return Err(BackendError::EmptyHistory);
        }
        let mut cursor = self.cursor.lock().unwrap_or_else(|e| e.into_inner());
        let call = *cursor;
        let entry = self.entries.get(call).ok_or(BackendError::ScriptExhausted(call))?;
        *cursor += 1;
        drop(cursor);
        entry.predicate.check(history).map_err(|reason| BackendError::ContextMismatch { call, reason })?;
        match &entry.response {
            Ok(text) => Ok(truncate_at_stop(text, stop).to_string()),
            Err(msg) => Err(BackendError::Scripted(msg.clone())),
        }
    }
}

/// OpenAI-compatible chat completion endpoint settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpChatConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    2
}
fn default_max_in_flight() -> usize {
    8
}
fn default_max_tokens() -> u32 {
    1024
}

impl HttpChatConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpChatConfig {
            base_url: base_url.into(),
            model: model.into(),
            auth_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_in_flight: default_max_in_flight(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

/// Chat completion client. Stop sequences are applied locally so the
/// returned text keeps the stop tag.
pub struct HttpChatBackend {
    agent: ureq::Agent,
    config: HttpChatConfig,
    token: Option<String>,
    gate: Semaphore,
    backoff: Duration,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

fn role_str(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

impl HttpChatBackend {
    pub fn new(config: HttpChatConfig) -> Result<Self, BackendError> {
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::MissingCredential(var.clone()))?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let permits = config.max_in_flight.max(1);
        Ok(HttpChatBackend {
            agent,
            config,
            token,
            gate: Semaphore { permits: Mutex::new(permits), freed: Condvar::new() },
            backoff: Duration::from_millis(500),
        })
    }

    /// Base delay for retries; doubles on each attempt.
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &ChatRequest<'_>) -> Result<String, BackendError> {
        let mut req = self.agent.post(self.endpoint());
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Status { status, body });
        }
        let parsed: ChatResponse = resp.body_mut().read_json().map_err(|e| BackendError::Decode(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Decode("response has no message content".into()))
    }
}

impl PolicyBackend for HttpChatBackend {
    fn complete(&self, history: &[ChatTurn], stop: &[&str]) -> Result<String, BackendError> {
        if history.is_empty() {
            return Err(BackendError::EmptyHistory);
        }
        let body = ChatRequest {
            model: &self.config.model,
            messages: history.iter().map(|t| WireMessage { role: role_str(t.role), content: &t.content }).collect(),
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        };
        let _permit = self.gate.acquire();
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(text) => return Ok(truncate_at_stop(&text, stop).to_string()),
                Err(e) if e.retryable() && attempt < self.config.max_retries => {
                    std::thread::sleep(self.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
