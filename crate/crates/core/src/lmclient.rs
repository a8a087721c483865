//! Chat-completion client with live and record/replay backends.
//!
//! Requests are identified by the SHA-256 of their canonical JSON form
//! (object keys sorted, no insignificant whitespace), so a replay store keyed
//! by that hash is independent of how a request happened to be serialized.
//!
//! Replay store files are JSONL, one `{"hash", "request", "response"}` object
//! per line. When a hash is re-recorded the first response is kept unless the
//! caller forces an overwrite.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable read for the live backend's bearer token.
pub const DEFAULT_API_KEY_ENV: &str = "DEBIAS_API_KEY";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no recorded response for request hash {hash}")]
    ReplayMiss { hash: String },
    #[error("HTTP {status} after {attempts} attempt(s): {body}")]
    Http {
        status: u16,
        body: String,
        attempts: u32,
    },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("malformed completion response: {0}")]
    BadResponse(String),
    #[error("credential variable {0} is not set")]
    MissingCredential(String),
    #[error("replay store {path}: {message}")]
    Store { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(rename = "model")]
    pub model_name: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Sampling seed, forwarded when the server supports it. Also separates
    /// otherwise identical requests in a replay store.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(model_name: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model_name: model_name.into(),
            messages,
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        let bad = |m: &str| Err(ClientError::InvalidRequest(m.to_string()));
        match self.messages.last() {
            None => return bad("at least one message is required"),
            Some(m) if m.role != Role::User => {
                return bad("the last message must come from the user")
            }
            _ => {}
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be nonnegative and finite");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        Ok(())
    }

    /// Compact JSON with object keys sorted at every level.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("request serializes");
        canonical_string(&value)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

/// Serialize `value` with sorted object keys regardless of how the map type
/// orders them.
pub fn canonical_string(value: &Value) -> String {
    fn sorted(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let ordered: BTreeMap<&String, Value> =
                    m.iter().map(|(k, v)| (k, sorted(v))).collect();
                let mut out = serde_json::Map::new();
                for (k, v) in ordered {
                    out.insert(k.clone(), v);
                }
                Value::Object(out)
            }
            Value::Array(a) => Value::Array(a.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    fn write(v: &Value, out: &mut String) {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                out.push('{');
                for (i, k) in keys.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&serde_json::to_string(k).expect("string key"));
                    out.push(':');
                    write(&m[k], out);
                }
                out.push('}');
            }
            Value::Array(a) => {
                out.push('[');
                for (i, x) in a.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(x, out);
                }
                out.push(']');
            }
            other => out.push_str(&other.to_string()),
        }
    }
    let mut out = String::new();
    write(&sorted(value), &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

/// Completion text plus why generation ended. `content` is present exactly
/// when `finish_reason` is not `Error`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    pub finish_reason: FinishReason,
}

impl ChatResponse {
    pub fn stop(content: impl Into<String>) -> Self {
        Self {
            content: Some(content.into()),
            finish_reason: FinishReason::Stop,
        }
    }

    pub fn length(content: impl Into<String>) -> Self {
        Self {
            content: Some(content.into()),
            finish_reason: FinishReason::Length,
        }
    }

    pub fn error() -> Self {
        Self {
            content: None,
            finish_reason: FinishReason::Error,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.content.is_some() == (self.finish_reason != FinishReason::Error)
    }

    pub fn text(&self) -> &str {
        self.content.as_deref().unwrap_or("")
    }
}

/// Anything that can answer a chat request.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError>;

    /// Human-readable identity recorded in manifests.
    fn identity(&self) -> String;
}

/// Validate, then delegate to the backend.
pub fn complete(
    request: &ChatRequest,
    backend: &dyn ChatBackend,
) -> Result<ChatResponse, ClientError> {
    request.validate()?;
    backend.complete(request)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreLine {
    hash: String,
    request: ChatRequest,
    response: ChatResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    KeptExisting,
    Overwritten,
}

/// Recorded responses keyed by canonical request hash. Reads are concurrent;
/// writes are serialized and persisted immediately when file-backed.
#[derive(Debug, Default)]
pub struct ReplayStore {
    path: Option<PathBuf>,
    entries: RwLock<BTreeMap<String, StoreLine>>,
    /// Insertion order, which is also the file's line order.
    order: Mutex<Vec<String>>,
}

impl ReplayStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open a file-backed store, loading existing lines. A missing file is an
    /// empty store; it is created on the first insert.
    pub fn open(path: &Path) -> Result<Self, ClientError> {
        let store_err = |message: String| ClientError::Store {
            path: path.display().to_string(),
            message,
        };
        let mut entries = BTreeMap::new();
        let mut order = Vec::new();
        if path.exists() {
            let f = fs::File::open(path).map_err(|e| store_err(e.to_string()))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| store_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: StoreLine = serde_json::from_str(&line)
                    .map_err(|e| store_err(format!("line {}: {e}", i + 1)))?;
                if rec.request.hash() != rec.hash {
                    return Err(store_err(format!(
                        "line {}: stored hash does not match its request",
                        i + 1
                    )));
                }
                if !entries.contains_key(&rec.hash) {
                    order.push(rec.hash.clone());
                    entries.insert(rec.hash.clone(), rec);
                }
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            order: Mutex::new(order),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, hash: &str) -> Option<ChatResponse> {
        self.entries
            .read()
            .expect("store lock")
            .get(hash)
            .map(|l| l.response.clone())
    }

    pub fn lookup(&self, request: &ChatRequest) -> Option<ChatResponse> {
        self.get(&request.hash())
    }

    pub fn insert(
        &self,
        request: &ChatRequest,
        response: &ChatResponse,
        force: bool,
    ) -> Result<InsertOutcome, ClientError> {
        let hash = request.hash();
        let line = StoreLine {
            hash: hash.clone(),
            request: request.clone(),
            response: response.clone(),
        };
        // Lock order: order, then entries.
        let mut order = self.order.lock().expect("store lock");
        let mut entries = self.entries.write().expect("store lock");
        let outcome = match entries.get(&hash) {
            Some(_) if !force => return Ok(InsertOutcome::KeptExisting),
            Some(_) => InsertOutcome::Overwritten,
            None => InsertOutcome::Inserted,
        };
        entries.insert(hash.clone(), line.clone());
        if outcome == InsertOutcome::Inserted {
            order.push(hash);
        }
        if let Some(path) = &self.path {
            let store_err = |e: std::io::Error| ClientError::Store {
                path: path.display().to_string(),
                message: e.to_string(),
            };
            match outcome {
                InsertOutcome::Inserted => {
                    let mut f = fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(path)
                        .map_err(store_err)?;
                    writeln!(
                        f,
                        "{}",
                        serde_json::to_string(&line).expect("line serializes")
                    )
                    .map_err(store_err)?;
                }
                _ => {
                    let mut text = String::new();
                    for h in order.iter() {
                        text.push_str(
                            &serde_json::to_string(&entries[h]).expect("line serializes"),
                        );
                        text.push('\n');
                    }
                    fs::write(path, text).map_err(store_err)?;
                }
            }
        }
        Ok(outcome)
    }
}

/// Answers only from a [`ReplayStore`]; misses are errors.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    store: Arc<ReplayStore>,
}

impl ReplayBackend {
    pub fn new(store: Arc<ReplayStore>) -> Self {
        Self { store }
    }

    pub fn store(&self) -> &ReplayStore {
        &self.store
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let hash = request.hash();
        self.store
            .get(&hash)
            .ok_or(ClientError::ReplayMiss { hash })
    }

    fn identity(&self) -> String {
        match self.store.path() {
            Some(p) => format!("replay:{}", p.display()),
            None => "replay:memory".to_string(),
        }
    }
}

/// Send `request` through `live` and persist the answer in `store`.
/// An already-recorded request is answered from the store unless `force`.
pub fn record(
    request: &ChatRequest,
    live: &dyn ChatBackend,
    store: &ReplayStore,
    force: bool,
) -> Result<ChatResponse, ClientError> {
    request.validate()?;
    if !force {
        if let Some(existing) = store.lookup(request) {
            return Ok(existing);
        }
    }
    let response = live.complete(request)?;
    store.insert(request, &response, force)?;
    Ok(response)
}

/// A backend that records every live answer into a store.
pub struct RecordingBackend<B> {
    live: B,
    store: Arc<ReplayStore>,
    force: bool,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(live: B, store: Arc<ReplayStore>, force: bool) -> Self {
        Self { live, store, force }
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        record(request, &self.live, &self.store, self.force)
    }

    fn identity(&self) -> String {
        format!("record({})", self.live.identity())
    }
}

/// A backend computed by a function; used to script fixtures.
pub struct FnBackend<F> {
    name: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, ClientError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self {
            name: name.into(),
            f,
        }
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, ClientError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        (self.f)(request)
    }

    fn identity(&self) -> String {
        self.name.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32
            .checked_shl(retry.saturating_sub(1))
            .unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Statuses worth retrying: timeouts, rate limits and server errors.
pub fn is_transient_status(status: u16) -> bool {
    matches!(status, 408 | 429) || (500..=599).contains(&status)
}

/// JSON-over-HTTP chat-completion endpoint (`POST {base_url}/chat/completions`).
#[derive(Debug, Clone)]
pub struct LiveBackend {
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            retry: RetryPolicy::default(),
            agent: ureq::Agent::new_with_config(config),
        }
    }

    /// Read the bearer token from `env_var`.
    pub fn from_env(base_url: impl Into<String>, env_var: &str) -> Result<Self, ClientError> {
        let key = std::env::var(env_var)
            .map_err(|_| ClientError::MissingCredential(env_var.to_string()))?;
        Ok(Self::new(base_url, Some(key)))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url)
    }

    fn attempt(&self, request: &ChatRequest) -> Result<(u16, String), String> {
        let mut req = self.agent.post(&self.endpoint());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(request).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        Ok((status, body))
    }
}

/// Extract `choices[0].message.content` and `choices[0].finish_reason`.
pub fn parse_completion_body(body: &str) -> Result<ChatResponse, ClientError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| ClientError::BadResponse(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| ClientError::BadResponse("missing choices[0]".into()))?;
    let content = choice
        .get("message")
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .ok_or_else(|| ClientError::BadResponse("missing choices[0].message.content".into()))?;
    Ok(match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => ChatResponse::length(content),
        _ => ChatResponse::stop(content),
    })
}

impl ChatBackend for LiveBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        request.validate()?;
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let retryable = match self.attempt(request) {
                Ok((status, body)) if (200..300).contains(&status) => {
                    return parse_completion_body(&body);
                }
                Ok((status, body)) => {
                    let err = ClientError::Http {
                        status,
                        body,
                        attempts,
                    };
                    if !is_transient_status(status) {
                        return Err(err);
                    }
                    err
                }
                Err(message) => ClientError::Transport { message, attempts },
            };
            if attempts > self.retry.max_retries {
                return Err(retryable);
            }
            thread::sleep(self.retry.delay(attempts));
        }
    }

    fn identity(&self) -> String {
        format!("live:{}", self.endpoint())
    }
}
