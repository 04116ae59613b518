//! Backend-agnostic chat-completion access.
//!
//! [`Gateway`] wraps any [`ChatBackend`] with a fingerprint-keyed response
//! cache, bounded concurrency, a request-rate limit, retries with exponential
//! backoff for transient failures, and usage/cost accounting.

mod cache;
mod http;
mod meter;
mod mock;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lang;
use crate::prompting::{ChatMessage, Stage};

pub use cache::{CacheEntry, ResponseCache};
pub use http::{HttpBackend, HttpBackendConfig};
pub use meter::{meter, GroupRow, GroupTotals, UsageSummary};
pub use mock::{load_replay_file, MockBackend, MockMode, MockScript, VERDICT_MARKER};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("request `{tag}`: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        tag: String,
        attempts: u32,
        message: String,
    },
    #[error("request `{tag}`: authentication rejected: {message}")]
    Auth { tag: String, message: String },
    #[error("request `{tag}`: quota exhausted: {message}")]
    Quota { tag: String, message: String },
    #[error("request `{tag}`: backend error: {message}")]
    Backend { tag: String, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache error: {0}")]
    Cache(String),
}

/// Failure reported by a backend for a single attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Worth retrying (connection reset, timeout, 5xx, rate limited).
    #[error("transient: {0}")]
    Transient(String),
    #[error("authentication: {0}")]
    Auth(String),
    #[error("quota: {0}")]
    Quota(String),
    /// Misconfiguration such as a replay miss; never retried.
    #[error("configuration: {0}")]
    Config(String),
    /// Any other non-retryable failure.
    #[error("{0}")]
    Fatal(String),
}

/// What a backend returns for one successful attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCompletion {
    pub text: String,
    /// `(prompt_tokens, completion_tokens)` when the backend reports them.
    pub usage: Option<(u64, u64)>,
    /// Simulated latency for deterministic backends; wall time is used otherwise.
    pub latency_ms: Option<f64>,
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, request: &ChatRequest) -> Result<RawCompletion, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output: u32,
    /// `unit_id:stage:iteration`, used for tracing and metering only.
    pub request_tag: String,
}

/// Stage label carried in request tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStage {
    Translate,
    Revise,
    Detect,
}

impl From<Stage> for CallStage {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Translate => CallStage::Translate,
            Stage::Revise => CallStage::Revise,
        }
    }
}

impl fmt::Display for CallStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CallStage::Translate => "translate",
            CallStage::Revise => "revise",
            CallStage::Detect => "detect",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestTag {
    pub unit_id: String,
    pub stage: CallStage,
    pub iteration: usize,
}

impl RequestTag {
    pub fn new(unit_id: impl Into<String>, stage: CallStage, iteration: usize) -> Self {
        Self {
            unit_id: unit_id.into(),
            stage,
            iteration,
        }
    }

    /// Parses from the right so unit ids may themselves contain `:`.
    pub fn parse(tag: &str) -> Option<Self> {
        let mut parts = tag.rsplitn(3, ':');
        let iteration = parts.next()?.parse().ok()?;
        let stage = match parts.next()? {
            "translate" => CallStage::Translate,
            "revise" => CallStage::Revise,
            "detect" => CallStage::Detect,
            _ => return None,
        };
        let unit_id = parts.next()?.to_string();
        Some(Self {
            unit_id,
            stage,
            iteration,
        })
    }
}

impl fmt::Display for RequestTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.unit_id, self.stage, self.iteration)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PriceTable {
    /// Price per 1,000 prompt tokens.
    pub input_per_1k: f64,
    /// Price per 1,000 completion tokens.
    pub output_per_1k: f64,
}

impl PriceTable {
    pub fn cost(&self, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        prompt_tokens as f64 / 1000.0 * self.input_per_1k
            + completion_tokens as f64 / 1000.0 * self.output_per_1k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// In price-table currency units.
    pub cost: f64,
    /// Token counts came from [`estimate_tokens`] rather than the backend.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub estimated: bool,
}

impl Usage {
    pub fn priced(prompt_tokens: u64, completion_tokens: u64, estimated: bool, prices: &PriceTable) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
            cost: prices.cost(prompt_tokens, completion_tokens),
            estimated,
        }
    }
}

/// Token estimate used when a backend reports no usage: one token per CJK
/// character plus one per four characters of any other text (rounded up).
pub fn estimate_tokens(text: &str) -> u64 {
    let (cjk, other) = text.chars().fold((0u64, 0u64), |(c, o), ch| {
        if lang::is_cjk_char(ch) {
            (c + 1, o)
        } else {
            (c, o + 1)
        }
    });
    cjk + other.div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub backend_id: String,
    pub cached: bool,
    /// Time spent serving this call (cache lookup time for cache hits).
    pub latency_ms: f64,
    pub request_tag: String,
    /// Latency of the call that originally produced `text`.
    pub origin_latency_ms: f64,
}

/// Stable content hash over `(model, temperature, messages)`. The request tag
/// is excluded.
pub fn fingerprint(request: &ChatRequest) -> String {
    let canonical = serde_json::json!({
        "model": request.model,
        "temperature": request.temperature,
        "messages": request.messages,
    });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    hex::encode(digest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Request defaults and limits applied by the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewaySettings {
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output")]
    pub max_output: u32,
    #[serde(default)]
    pub prices: PriceTable,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Requests per second across all workers; `None` disables the limit.
    #[serde(default)]
    pub requests_per_second: Option<f64>,
}

fn default_max_output() -> u32 {
    1024
}

fn default_in_flight() -> usize {
    4
}

impl GatewaySettings {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            temperature: 0.0,
            max_output: default_max_output(),
            prices: PriceTable::default(),
            retry: RetryPolicy::default(),
            max_in_flight: default_in_flight(),
            requests_per_second: None,
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// Spaces request starts at least `1 / rate` seconds apart.
struct RateLimiter {
    interval: Option<Duration>,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn new(rate: Option<f64>) -> Self {
        Self {
            interval: rate
                .filter(|r| *r > 0.0)
                .map(|r| Duration::from_secs_f64(1.0 / r)),
            next_slot: Mutex::new(None),
        }
    }

    fn wait(&self) {
        let Some(interval) = self.interval else { return };
        let start = {
            let mut slot = self.next_slot.lock().expect("limiter poisoned");
            let now = Instant::now();
            let start = slot.map_or(now, |s| s.max(now));
            *slot = Some(start + interval);
            start
        };
        let now = Instant::now();
        if start > now {
            thread::sleep(start - now);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub live_calls: u64,
    pub cache_hits: u64,
    pub retries: u64,
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    settings: GatewaySettings,
    cache: Option<ResponseCache>,
    limiter: RateLimiter,
    in_flight: Semaphore,
    live_calls: AtomicU64,
    cache_hits: AtomicU64,
    retries: AtomicU64,
    log: Mutex<Vec<ChatResponse>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, settings: GatewaySettings) -> Self {
        Self {
            limiter: RateLimiter::new(settings.requests_per_second),
            in_flight: Semaphore::new(settings.max_in_flight),
            backend,
            settings,
            cache: None,
            live_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            retries: AtomicU64::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn settings(&self) -> &GatewaySettings {
        &self.settings
    }

    /// Builds a request with the configured model, temperature and output limit.
    pub fn request(&self, messages: Vec<ChatMessage>, tag: &RequestTag) -> ChatRequest {
        ChatRequest {
            model: self.settings.model.clone(),
            messages,
            temperature: self.settings.temperature,
            max_output: self.settings.max_output,
            request_tag: tag.to_string(),
        }
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            live_calls: self.live_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
        }
    }

    /// Every response served so far, in completion order.
    pub fn responses(&self) -> Vec<ChatResponse> {
        self.log.lock().expect("log poisoned").clone()
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if request.messages.is_empty() {
            return Err(GatewayError::InvalidRequest(format!(
                "`{}` has no messages",
                request.request_tag
            )));
        }
        if !(request.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "`{}` has negative temperature",
                request.request_tag
            )));
        }
        let fp = fingerprint(request);
        let lookup_start = Instant::now();
        if let Some(entry) = self.cache.as_ref().and_then(|c| c.get(&fp)) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            let response = ChatResponse {
                text: entry.text,
                usage: Usage::priced(
                    entry.prompt_tokens,
                    entry.completion_tokens,
                    entry.estimated,
                    &self.settings.prices,
                ),
                backend_id: entry.backend_id,
                cached: true,
                latency_ms: lookup_start.elapsed().as_secs_f64() * 1000.0,
                request_tag: request.request_tag.clone(),
                origin_latency_ms: entry.latency_ms,
            };
            self.record(&response);
            return Ok(response);
        }

        let raw = self.send_with_retries(request)?;
        let text = raw.text.trim_end().to_string();
        let (prompt_tokens, completion_tokens, estimated) = match raw.usage {
            Some((p, c)) => (p, c, false),
            None => {
                let prompt: u64 = request
                    .messages
                    .iter()
                    .map(|m| estimate_tokens(&m.content))
                    .sum();
                (prompt, estimate_tokens(&text), true)
            }
        };
        let latency_ms = raw.latency_ms.unwrap_or(0.0);
        if let Some(cache) = &self.cache {
            cache
                .insert(
                    &fp,
                    CacheEntry {
                        text: text.clone(),
                        prompt_tokens,
                        completion_tokens,
                        estimated,
                        latency_ms,
                        backend_id: self.backend.id().to_string(),
                    },
                )
                .map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        let response = ChatResponse {
            text,
            usage: Usage::priced(prompt_tokens, completion_tokens, estimated, &self.settings.prices),
            backend_id: self.backend.id().to_string(),
            cached: false,
            latency_ms,
            request_tag: request.request_tag.clone(),
            origin_latency_ms: latency_ms,
        };
        self.record(&response);
        Ok(response)
    }

    fn record(&self, response: &ChatResponse) {
        self.log.lock().expect("log poisoned").push(response.clone());
    }

    fn send_with_retries(&self, request: &ChatRequest) -> Result<RawCompletion, GatewayError> {
        let tag = request.request_tag.clone();
        let policy = self.settings.retry;
        let mut attempt = 0u32;
        loop {
            let outcome = {
                let _permit = self.in_flight.acquire();
                self.limiter.wait();
                self.live_calls.fetch_add(1, Ordering::SeqCst);
                let started = Instant::now();
                self.backend.send(request).map(|mut raw| {
                    if raw.latency_ms.is_none() {
                        raw.latency_ms = Some(started.elapsed().as_secs_f64() * 1000.0);
                    }
                    raw
                })
            };
            match outcome {
                Ok(raw) => return Ok(raw),
                Err(BackendError::Transient(message)) => {
                    if attempt >= policy.max_retries {
                        return Err(GatewayError::Transport {
                            tag,
                            attempts: attempt + 1,
                            message,
                        });
                    }
                    log::debug!("request `{tag}` attempt {} failed: {message}", attempt + 1);
                    thread::sleep(policy.delay(attempt));
                    self.retries.fetch_add(1, Ordering::SeqCst);
                    attempt += 1;
                }
                Err(BackendError::Auth(message)) => return Err(GatewayError::Auth { tag, message }),
                Err(BackendError::Quota(message)) => {
                    return Err(GatewayError::Quota { tag, message })
                }
                Err(BackendError::Config(message)) => return Err(GatewayError::Config(message)),
                Err(BackendError::Fatal(message)) => {
                    return Err(GatewayError::Backend { tag, message })
                }
            }
        }
    }
}
