//! Completion providers.
//!
//! [`Provider`] wraps either an HTTP endpoint speaking the completions (or
//! chat-completions) JSON wire format, or a [`ReplayScript`] that answers
//! from a fixture file. Every call goes through a counting semaphore that
//! bounds in-flight requests.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;
pub const DEFAULT_BACKOFF_BASE_MS: u64 = 1000;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("missing provider setting `{0}`")]
    MissingSetting(String),
    #[error("credential environment variable `{0}` is unset or empty")]
    MissingCredential(String),
    #[error("invalid provider setting `{key}`: {message}")]
    InvalidSetting { key: String, message: String },
    #[error("cannot read replay script {path}: {message}")]
    UnreadableScript { path: String, message: String },
    #[error("request rejected: prompt is empty")]
    EmptyPrompt,
    #[error("gave up after {attempts} attempts (last status {last_status:?}): {last_error}")]
    ExhaustedRetries {
        attempts: u32,
        last_status: Option<u16>,
        last_error: String,
    },
    #[error("authentication failed with status {0}")]
    AuthenticationFailure(u16),
    #[error("request too large for the provider (status {0})")]
    RequestTooLarge(u16),
    #[error("provider returned status {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("replay script exhausted after {served} responses")]
    ReplayExhausted { served: usize },
    #[error("no pending replay entry matches request #{request_index}")]
    ReplayNoMatch { request_index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl CompletionRequest {
    /// Request with the default decoding settings (temperature 0, 1024 tokens).
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: 0.0,
            stop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    pub provider_id: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

/// How a replay entry is matched against incoming requests.
#[derive(Debug, Clone, PartialEq)]
pub enum ReplayMatch {
    /// Taken in script order by any request no other entry claims.
    Next,
    /// Claimed by the first request whose prompt contains the substring.
    Substring(String),
    /// Claimed by the request with this zero-based sequence number.
    Index(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub matcher: ReplayMatch,
    pub response: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReplayEntry {
    #[serde(default)]
    match_substring: Option<String>,
    #[serde(default)]
    match_index: Option<usize>,
    response: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayScript {
    pub entries: Vec<ReplayEntry>,
}

impl ReplayScript {
    pub fn new(entries: Vec<ReplayEntry>) -> Self {
        Self { entries }
    }

    /// Script whose responses are served strictly in order.
    pub fn sequential<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(
            responses
                .into_iter()
                .map(|r| ReplayEntry {
                    matcher: ReplayMatch::Next,
                    response: r.into(),
                })
                .collect(),
        )
    }

    /// Parses the fixture format: a JSON list of
    /// `{"match_substring"?: str, "match_index"?: int, "response": str}`.
    pub fn from_json_str(text: &str) -> Result<Self, String> {
        let raw: Vec<RawReplayEntry> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut entries = Vec::with_capacity(raw.len());
        for (i, r) in raw.into_iter().enumerate() {
            let matcher = match (r.match_substring, r.match_index) {
                (Some(_), Some(_)) => return Err(format!("entry {i} sets both match_substring and match_index")),
                (Some(s), None) => ReplayMatch::Substring(s),
                (None, Some(n)) => ReplayMatch::Index(n),
                (None, None) => ReplayMatch::Next,
            };
            entries.push(ReplayEntry {
                matcher,
                response: r.response,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let unreadable = |message: String| GatewayError::UnreadableScript {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| unreadable(e.to_string()))?;
        Self::from_json_str(&text).map_err(unreadable)
    }
}

#[derive(Debug)]
struct ReplayState {
    consumed: Vec<bool>,
    requests: usize,
    served: usize,
}

#[derive(Debug)]
struct ReplayBackend {
    script: ReplayScript,
    state: Mutex<ReplayState>,
}

impl ReplayBackend {
    fn new(script: ReplayScript) -> Self {
        let n = script.entries.len();
        Self {
            script,
            state: Mutex::new(ReplayState {
                consumed: vec![false; n],
                requests: 0,
                served: 0,
            }),
        }
    }

    /// Claims one pending entry: an index match first, then the first
    /// substring match, then the first unmatched-order entry.
    fn serve(&self, prompt: &str) -> Result<String, GatewayError> {
        let mut st = self.state.lock().expect("replay state poisoned");
        let request_index = st.requests;
        st.requests += 1;
        let pending = |i: &usize| !st.consumed[*i];
        let entries = &self.script.entries;
        let by_index = (0..entries.len())
            .filter(pending)
            .find(|&i| entries[i].matcher == ReplayMatch::Index(request_index));
        let chosen = by_index
            .or_else(|| {
                (0..entries.len()).filter(pending).find(|&i| match &entries[i].matcher {
                    ReplayMatch::Substring(s) => prompt.contains(s.as_str()),
                    _ => false,
                })
            })
            .or_else(|| {
                (0..entries.len())
                    .filter(pending)
                    .find(|&i| entries[i].matcher == ReplayMatch::Next)
            });
        match chosen {
            Some(i) => {
                st.consumed[i] = true;
                st.served += 1;
                Ok(entries[i].response.clone())
            }
            None if st.consumed.iter().all(|&c| c) => Err(GatewayError::ReplayExhausted { served: st.served }),
            None => Err(GatewayError::ReplayNoMatch { request_index }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireFormat {
    Completions,
    Chat,
}

#[derive(Debug)]
struct HttpBackend {
    endpoint: String,
    model: String,
    wire: WireFormat,
    token: String,
    max_attempts: u32,
    backoff_base: Duration,
    client: reqwest::blocking::Client,
}

enum AttemptError {
    Retryable {
        status: Option<u16>,
        message: String,
        retry_after: Option<Duration>,
    },
    Fatal(GatewayError),
}

impl HttpBackend {
    fn body(&self, req: &CompletionRequest) -> Value {
        let mut body = match self.wire {
            WireFormat::Completions => json!({
                "model": self.model,
                "prompt": req.prompt,
                "max_tokens": req.max_tokens,
                "temperature": req.temperature,
            }),
            WireFormat::Chat => json!({
                "model": self.model,
                "messages": [{"role": "user", "content": req.prompt}],
                "max_tokens": req.max_tokens,
                "temperature": req.temperature,
            }),
        };
        if let Some(stop) = &req.stop {
            body["stop"] = json!(stop);
        }
        body
    }

    fn extract_text(&self, v: &Value) -> Option<String> {
        let choice = v.get("choices")?.get(0)?;
        let text = match self.wire {
            WireFormat::Completions => choice.get("text"),
            WireFormat::Chat => choice.get("message").and_then(|m| m.get("content")),
        };
        text?.as_str().map(str::to_string)
    }

    fn attempt(&self, req: &CompletionRequest) -> Result<String, AttemptError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.token)
            .json(&self.body(req))
            .send()
            .map_err(|e| AttemptError::Retryable {
                status: None,
                message: e.to_string(),
                retry_after: None,
            })?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|h| h.to_str().ok())
            .and_then(|s| s.trim().parse::<f64>().ok())
            .filter(|s| s.is_finite() && *s >= 0.0)
            .map(Duration::from_secs_f64);
        let body = resp.text().unwrap_or_default();
        match status {
            200..=299 => {
                let v: Value = serde_json::from_str(&body)
                    .map_err(|e| AttemptError::Fatal(GatewayError::MalformedResponse(e.to_string())))?;
                self.extract_text(&v).ok_or_else(|| {
                    AttemptError::Fatal(GatewayError::MalformedResponse(
                        "no completion text in `choices[0]`".to_string(),
                    ))
                })
            }
            401 | 403 => Err(AttemptError::Fatal(GatewayError::AuthenticationFailure(status))),
            413 => Err(AttemptError::Fatal(GatewayError::RequestTooLarge(status))),
            408 | 429 | 500..=599 => Err(AttemptError::Retryable {
                status: Some(status),
                message: body,
                retry_after: if status == 429 { retry_after } else { None },
            }),
            _ => Err(AttemptError::Fatal(GatewayError::HttpStatus { status, body })),
        }
    }

    fn complete(&self, req: &CompletionRequest) -> Result<(String, u32), GatewayError> {
        let mut last_status = None;
        let mut last_error = String::new();
        for attempt in 1..=self.max_attempts {
            match self.attempt(req) {
                Ok(text) => return Ok((text, attempt)),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable {
                    status,
                    message,
                    retry_after,
                }) => {
                    warn!("attempt {attempt} to {} failed ({status:?}): {message}", self.endpoint);
                    last_status = status;
                    last_error = message;
                    if attempt < self.max_attempts {
                        std::thread::sleep(retry_after.unwrap_or_else(|| self.backoff(attempt)));
                    }
                }
            }
        }
        Err(GatewayError::ExhaustedRetries {
            attempts: self.max_attempts,
            last_status,
            last_error,
        })
    }

    /// base * 2^(attempt-1), scaled by a uniform jitter factor in [0.5, 1.0].
    fn backoff(&self, attempt: u32) -> Duration {
        let exp = self.backoff_base.saturating_mul(1u32 << (attempt - 1).min(16));
        exp.mul_f64(0.5 + 0.5 * rand::random::<f64>())
    }
}

#[derive(Debug)]
enum Backend {
    Http(HttpBackend),
    Replay(ReplayBackend),
}

/// Counting semaphore with a high-water mark for tests.
#[derive(Debug)]
struct Permits {
    limit: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

struct PermitGuard<'a>(&'a Permits);

impl Permits {
    fn new(limit: usize) -> Self {
        Self {
            limit,
            in_use: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut n = self.in_use.lock().expect("permit lock poisoned");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("permit lock poisoned");
        }
        *n += 1;
        self.peak.fetch_max(*n, Ordering::SeqCst);
        PermitGuard(self)
    }
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_use.lock().expect("permit lock poisoned");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Provider handle; cheap to share across threads by reference.
#[derive(Debug)]
pub struct Provider {
    id: String,
    backend: Backend,
    permits: Permits,
    probe_delay: Option<Duration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Http,
    Replay,
}

impl std::str::FromStr for ProviderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(Self::Http),
            "replay" => Ok(Self::Replay),
            other => Err(format!("unknown provider kind `{other}` (expected http or replay)")),
        }
    }
}

fn parse_setting<T: std::str::FromStr>(settings: &BTreeMap<String, String>, key: &str, default: T) -> Result<T, GatewayError>
where
    T::Err: std::fmt::Display,
{
    match settings.get(key) {
        None => Ok(default),
        Some(v) => v.trim().parse().map_err(|e: T::Err| GatewayError::InvalidSetting {
            key: key.to_string(),
            message: e.to_string(),
        }),
    }
}

/// Builds a validated provider from string settings.
///
/// `http` requires `endpoint`, `model_name` and `credential_env` (the name
/// of the environment variable holding the bearer token); optional keys are
/// `chat` (bool), `max_attempts`, `backoff_base_ms` and `timeout_secs`.
/// `replay` requires `script` (a path). Both accept `max_in_flight`.
pub fn configure_provider(kind: ProviderKind, settings: &BTreeMap<String, String>) -> Result<Provider, GatewayError> {
    let required = |key: &str| {
        settings
            .get(key)
            .filter(|v| !v.trim().is_empty())
            .cloned()
            .ok_or_else(|| GatewayError::MissingSetting(key.to_string()))
    };
    let max_in_flight: usize = parse_setting(settings, "max_in_flight", DEFAULT_MAX_IN_FLIGHT)?;
    if max_in_flight == 0 {
        return Err(GatewayError::InvalidSetting {
            key: "max_in_flight".into(),
            message: "must be at least 1".into(),
        });
    }
    match kind {
        ProviderKind::Http => {
            let endpoint = required("endpoint")?;
            let model = required("model_name")?;
            let env_name = required("credential_env")?;
            let token = std::env::var(&env_name)
                .ok()
                .filter(|t| !t.is_empty())
                .ok_or_else(|| GatewayError::MissingCredential(env_name.clone()))?;
            let max_attempts: u32 = parse_setting(settings, "max_attempts", DEFAULT_MAX_ATTEMPTS)?;
            if max_attempts == 0 {
                return Err(GatewayError::InvalidSetting {
                    key: "max_attempts".into(),
                    message: "must be at least 1".into(),
                });
            }
            let backoff_ms: u64 = parse_setting(settings, "backoff_base_ms", DEFAULT_BACKOFF_BASE_MS)?;
            let timeout: u64 = parse_setting(settings, "timeout_secs", DEFAULT_TIMEOUT_SECS)?;
            let chat: bool = parse_setting(settings, "chat", false)?;
            let client = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(timeout))
                .build()
                .map_err(|e| GatewayError::InvalidSetting {
                    key: "endpoint".into(),
                    message: e.to_string(),
                })?;
            Ok(Provider {
                id: model.clone(),
                backend: Backend::Http(HttpBackend {
                    endpoint,
                    model,
                    wire: if chat { WireFormat::Chat } else { WireFormat::Completions },
                    token,
                    max_attempts,
                    backoff_base: Duration::from_millis(backoff_ms),
                    client,
                }),
                permits: Permits::new(max_in_flight),
                probe_delay: None,
            })
        }
        ProviderKind::Replay => {
            let path = required("script")?;
            let script = ReplayScript::load(&path)?;
            Ok(Provider::replay_with_limit(script, max_in_flight).with_id(format!("replay:{path}")))
        }
    }
}

impl Provider {
    pub fn replay(script: ReplayScript) -> Self {
        Self::replay_with_limit(script, DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn replay_with_limit(script: ReplayScript, max_in_flight: usize) -> Self {
        Self {
            id: "replay".to_string(),
            backend: Backend::Replay(ReplayBackend::new(script)),
            permits: Permits::new(max_in_flight.max(1)),
            probe_delay: None,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Holds each permit for `delay` before answering; lets tests observe
    /// overlapping requests.
    pub fn with_probe_delay(mut self, delay: Duration) -> Self {
        self.probe_delay = Some(delay);
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn max_in_flight(&self) -> usize {
        self.permits.limit
    }

    /// Highest number of simultaneously in-flight requests seen so far.
    pub fn peak_in_flight(&self) -> usize {
        self.permits.peak.load(Ordering::SeqCst)
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        if req.prompt.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let _permit = self.permits.acquire();
        let started = Instant::now();
        if let Some(d) = self.probe_delay {
            std::thread::sleep(d);
        }
        let (text, attempt_count) = match &self.backend {
            Backend::Replay(r) => (r.serve(&req.prompt)?, 1),
            Backend::Http(h) => h.complete(req)?,
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        debug!("{} answered in {latency_ms} ms after {attempt_count} attempt(s)", self.id);
        Ok(CompletionResult {
            text,
            provider_id: self.id.clone(),
            latency_ms,
            attempt_count,
        })
    }
}
