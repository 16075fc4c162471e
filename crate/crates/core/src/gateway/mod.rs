//! Uniform access to chat-model providers.
//!
//! A [`Gateway`] routes each [`ChatRequest`] to a [`ChatProvider`] by model
//! name, bounds the number of in-flight requests, retries transient failures
//! with exponential backoff, keeps a running usage ledger and optionally
//! records every completed call into a [`FixtureStore`] so later runs can be
//! replayed offline with [`ReplayProvider`].

mod config;
mod fixtures;
mod http;
mod scripted;

pub use config::{GatewayConfig, GatewaySettings, ProviderConfig, ProviderKind};
pub use fixtures::{Fixture, FixtureStore, ReplayProvider};
pub use http::{AnthropicProvider, OpenAiProvider};
pub use scripted::ScriptedProvider;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::GatewayError;

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_MAX_TOKENS: u32 = 4096;
pub const REASONING_MAX_TOKENS: u32 = 8192;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningEffort {
    Low,
    Medium,
    High,
}

impl ReasoningEffort {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReasoningEffort::Low => "low",
            ReasoningEffort::Medium => "medium",
            ReasoningEffort::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub n_samples: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_effort: Option<ReasoningEffort>,
    #[serde(default)]
    pub extended_thinking: bool,
    /// Distinguishes repeated draws of an otherwise identical prompt, so that
    /// resampling loops map to distinct fixtures.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub draw: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

/// The fields that identify a request in the fixture store.
#[derive(Serialize, PartialEq)]
struct DigestKey<'a> {
    model_name: &'a str,
    messages: &'a [Message],
    temperature: f64,
    n_samples: u32,
    reasoning_effort: Option<ReasoningEffort>,
    #[serde(skip_serializing_if = "is_zero")]
    draw: u32,
}

impl ChatRequest {
    pub fn new(model_name: impl Into<String>, messages: Vec<Message>) -> Self {
        ChatRequest {
            model_name: model_name.into(),
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            n_samples: 1,
            reasoning_effort: None,
            extended_thinking: false,
            draw: 0,
        }
    }

    /// Single user-turn request.
    pub fn prompt(model_name: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self::new(model_name, vec![Message::user(prompt)])
    }

    pub fn with_samples(mut self, n: u32) -> Self {
        self.n_samples = n;
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn with_draw(mut self, draw: u32) -> Self {
        self.draw = draw;
        self
    }

    /// Sets the effort level; the token ceiling rises to 8192 unless it was
    /// set explicitly to something else.
    pub fn with_reasoning_effort(mut self, effort: Option<ReasoningEffort>) -> Self {
        self.reasoning_effort = effort;
        if effort.is_some() && self.max_tokens == DEFAULT_MAX_TOKENS {
            self.max_tokens = REASONING_MAX_TOKENS;
        }
        self
    }

    pub fn with_extended_thinking(mut self, on: bool) -> Self {
        self.extended_thinking = on;
        if on && self.max_tokens == DEFAULT_MAX_TOKENS {
            self.max_tokens = REASONING_MAX_TOKENS;
        }
        self
    }

    fn key(&self) -> DigestKey<'_> {
        DigestKey {
            model_name: &self.model_name,
            messages: &self.messages,
            temperature: self.temperature,
            n_samples: self.n_samples,
            reasoning_effort: self.reasoning_effort,
            draw: self.draw,
        }
    }

    /// Stable hex SHA-256 of the identifying fields.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(&self.key()).expect("request key serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// True when both requests share every identifying field.
    pub fn same_identity(&self, other: &ChatRequest) -> bool {
        self.key() == other.key()
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.into()));
        if self.n_samples < 1 {
            return bad("n_samples must be at least 1");
        }
        if self.max_tokens < 1 {
            return bad("max_tokens must be positive");
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be a finite non-negative number");
        }
        if self.messages.is_empty() {
            return bad("request has no messages");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub completions: Vec<String>,
    pub usage: Usage,
    pub provider_id: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    #[serde(default)]
    pub native_multi_sample: bool,
    #[serde(default)]
    pub reasoning_effort: bool,
    #[serde(default)]
    pub extended_thinking: bool,
}

impl Capabilities {
    pub const ALL: Capabilities =
        Capabilities { native_multi_sample: true, reasoning_effort: true, extended_thinking: true };
}

/// One vendor endpoint. `send` performs a single attempt; retries, sampling
/// emulation and accounting live in [`Gateway`].
pub trait ChatProvider: Send + Sync {
    fn id(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    available: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter { available: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Run-level accounting; per-call usage always sums to these totals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageReport {
    pub calls: u64,
    pub attempts: u64,
    pub usage: Usage,
    pub per_model: BTreeMap<String, Usage>,
}

pub struct Gateway {
    routes: BTreeMap<String, Arc<dyn ChatProvider>>,
    fallback: Option<Arc<dyn ChatProvider>>,
    retry: RetryPolicy,
    limiter: Limiter,
    max_in_flight: usize,
    ledger: Mutex<UsageReport>,
    recorder: Option<FixtureStore>,
}

impl Gateway {
    /// A gateway that sends every model to `provider`.
    pub fn new(provider: Arc<dyn ChatProvider>) -> Self {
        Gateway {
            routes: BTreeMap::new(),
            fallback: Some(provider),
            retry: RetryPolicy::default(),
            limiter: Limiter::new(DEFAULT_MAX_IN_FLIGHT),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            ledger: Mutex::new(UsageReport::default()),
            recorder: None,
        }
    }

    /// A gateway that routes by model name, with no fallback.
    pub fn routed(routes: BTreeMap<String, Arc<dyn ChatProvider>>) -> Self {
        Gateway { routes, fallback: None, ..Gateway::new(Arc::new(ScriptedProvider::unreachable())) }
    }

    /// Replay every request from a fixture directory.
    pub fn replay(store: FixtureStore) -> Self {
        Gateway::new(Arc::new(ReplayProvider::new(store)))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.limiter = Limiter::new(n);
        self.max_in_flight = n.max(1);
        self
    }

    pub fn with_recorder(mut self, store: FixtureStore) -> Self {
        self.recorder = Some(store);
        self
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn usage(&self) -> UsageReport {
        self.ledger.lock().unwrap().clone()
    }

    fn provider_for(&self, model: &str) -> Result<&Arc<dyn ChatProvider>, GatewayError> {
        self.routes.get(model).or(self.fallback.as_ref()).ok_or_else(|| GatewayError::UnknownModel(model.to_string()))
    }

    /// Send `request`, returning exactly `n_samples` completions.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let provider = self.provider_for(&request.model_name)?;
        let caps = provider.capabilities();
        if request.reasoning_effort.is_some() && !caps.reasoning_effort {
            return Err(GatewayError::Capability { provider: provider.id().to_string(), feature: "reasoning_effort" });
        }
        if request.extended_thinking && !caps.extended_thinking {
            return Err(GatewayError::Capability { provider: provider.id().to_string(), feature: "extended_thinking" });
        }

        let _permit = self.limiter.acquire();
        let (response, attempts) = if request.n_samples == 1 || caps.native_multi_sample {
            self.send_with_retry(provider.as_ref(), request)?
        } else {
            // Emulate n samples with sequential single-sample calls.
            let single = ChatRequest { n_samples: 1, ..request.clone() };
            let mut merged = ChatResponse {
                completions: Vec::with_capacity(request.n_samples as usize),
                usage: Usage::default(),
                provider_id: provider.id().to_string(),
                latency_ms: 0,
            };
            let mut attempts = 0;
            for _ in 0..request.n_samples {
                let (part, used) = self.send_with_retry(provider.as_ref(), &single)?;
                attempts += used;
                merged.completions.extend(part.completions);
                merged.usage += part.usage;
                merged.latency_ms += part.latency_ms;
            }
            (merged, attempts)
        };
        if response.completions.len() != request.n_samples as usize {
            return Err(GatewayError::PartialResponse { expected: request.n_samples, got: response.completions.len() });
        }
        {
            let mut ledger = self.ledger.lock().unwrap();
            ledger.calls += 1;
            ledger.attempts += attempts as u64;
            ledger.usage += response.usage;
            *ledger.per_model.entry(request.model_name.clone()).or_default() += response.usage;
        }
        if let Some(store) = &self.recorder {
            store.record(request, &response)?;
        }
        Ok(response)
    }

    fn send_with_retry(
        &self,
        provider: &dyn ChatProvider,
        request: &ChatRequest,
    ) -> Result<(ChatResponse, u32), GatewayError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            let err = match provider.send(request) {
                Ok(mut resp) => {
                    if resp.latency_ms == 0 {
                        resp.latency_ms = started.elapsed().as_millis() as u64;
                    }
                    return Ok((resp, attempt));
                }
                Err(e) => e,
            };
            let retryable = match &err {
                GatewayError::Rejected { status, .. } => *status == 429 || *status >= 500,
                e => e.is_transient(),
            };
            if !retryable {
                return Err(err);
            }
            if attempt >= self.retry.max_attempts {
                return Err(match err {
                    GatewayError::Rejected { status: 429, .. } => {
                        GatewayError::RateLimitExhausted { attempts: attempt }
                    }
                    GatewayError::Rejected { status, .. } => {
                        GatewayError::RetriesExhausted { attempts: attempt, status }
                    }
                    other => other,
                });
            }
            log::warn!("{} attempt {attempt} failed: {err}; retrying", provider.id());
            std::thread::sleep(self.retry.delay_before(attempt));
        }
    }
}
