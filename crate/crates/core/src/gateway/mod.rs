//! Chat-completion access with schema-checked JSON replies.
//!
//! A [`Gateway`] wraps one [`Backend`] and adds response caching,
//! transport retries with backoff, parse-and-repair rounds, token
//! accounting and an optional in-flight limit.

pub mod http;
pub mod mock;
pub mod schema;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::GatewayError;
use crate::prompts::{PROMPT_VERSION, SYSTEM_TEXT};
use crate::store::{CacheKey, ResponseCache};
use crate::tokenize::Tokenizer;

pub use schema::{SchemaId, SchemaValue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub schema: SchemaId,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn new(
        system_text: impl Into<String>,
        user_text: impl Into<String>,
        schema: SchemaId,
    ) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            schema,
            temperature: 0.0,
            max_output_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatOutcome {
    pub parsed_value: SchemaValue,
    pub raw_text: String,
    /// Input tokens of the first attempt (the prompt as designed).
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub attempts: u32,
}

/// What a backend receives for one attempt.
#[derive(Debug, Clone, Copy)]
pub struct BackendRequest<'a> {
    pub system_text: &'a str,
    pub user_text: &'a str,
    pub schema: SchemaId,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError {
    pub message: String,
    pub retryable: bool,
}

impl TransportError {
    pub fn retryable(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: true,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: false,
        }
    }
}

/// A chat-completion provider. Implementations must be safe to call from
/// many threads at once.
pub trait Backend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn model_id(&self) -> &str;
    fn complete(&self, req: &BackendRequest<'_>) -> Result<BackendReply, TransportError>;
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts before a schema failure becomes `ParseExhausted`.
    pub schema_attempts: u32,
    /// Extra tries after a retryable transport failure.
    pub transport_retries: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            schema_attempts: 3,
            transport_retries: 5,
            base_backoff_ms: 500,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, retry: u32) -> Duration {
        if self.base_backoff_ms == 0 {
            return Duration::ZERO;
        }
        let exp = self
            .base_backoff_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.max_backoff_ms);
        // Full jitter over the upper half of the window.
        let jittered = rand::rng().random_range(exp / 2..=exp);
        Duration::from_millis(jittered)
    }
}

/// Counters accumulated over a gateway's lifetime.
#[derive(Debug, Default)]
pub struct GatewayStats {
    pub requests: AtomicU64,
    pub backend_calls: AtomicU64,
    pub cache_hits: AtomicU64,
    pub repairs: AtomicU64,
    pub transport_retries: AtomicU64,
    pub parse_exhausted: AtomicU64,
    pub usage_reported: AtomicU64,
    pub usage_estimated: AtomicU64,
    /// Prompt tokens as reported by the backend, summed over calls that
    /// reported usage.
    pub reported_prompt_tokens: AtomicU64,
    /// The fallback tokenizer's count for those same prompts.
    pub estimated_prompt_tokens: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub requests: u64,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub repairs: u64,
    pub transport_retries: u64,
    pub parse_exhausted: u64,
    pub usage_reported: u64,
    pub usage_estimated: u64,
    pub reported_prompt_tokens: u64,
    pub estimated_prompt_tokens: u64,
}

impl GatewayStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        StatsSnapshot {
            requests: g(&self.requests),
            backend_calls: g(&self.backend_calls),
            cache_hits: g(&self.cache_hits),
            repairs: g(&self.repairs),
            transport_retries: g(&self.transport_retries),
            parse_exhausted: g(&self.parse_exhausted),
            usage_reported: g(&self.usage_reported),
            usage_estimated: g(&self.usage_estimated),
            reported_prompt_tokens: g(&self.reported_prompt_tokens),
            estimated_prompt_tokens: g(&self.estimated_prompt_tokens),
        }
    }
}

fn bump(a: &AtomicU64) {
    a.fetch_add(1, Ordering::Relaxed);
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct InFlightGuard<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    tokenizer: Tokenizer,
    retry: RetryPolicy,
    cache: Option<Arc<ResponseCache>>,
    in_flight: Option<InFlight>,
    temperature: f64,
    max_output_tokens: u32,
    stats: GatewayStats,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            tokenizer: Tokenizer::Whitespace,
            retry: RetryPolicy::default(),
            cache: None,
            in_flight: None,
            temperature: 0.0,
            max_output_tokens: 1024,
            stats: GatewayStats::default(),
        }
    }

    pub fn mock() -> Self {
        Self::new(Arc::new(mock::MockBackend))
    }

    pub fn with_tokenizer(mut self, tokenizer: Tokenizer) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight = Some(InFlight {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        });
        self
    }

    pub fn with_decoding(mut self, temperature: f64, max_output_tokens: u32) -> Self {
        self.temperature = temperature;
        self.max_output_tokens = max_output_tokens;
        self
    }

    /// A request carrying this gateway's system text and decoding settings.
    pub fn request(&self, user_text: impl Into<String>, schema: SchemaId) -> ChatRequest {
        ChatRequest {
            system_text: SYSTEM_TEXT.to_string(),
            user_text: user_text.into(),
            schema,
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
        }
    }

    pub fn backend_id(&self) -> &str {
        self.backend.backend_id()
    }

    pub fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    pub fn tokenizer(&self) -> Tokenizer {
        self.tokenizer
    }

    pub fn stats(&self) -> &GatewayStats {
        &self.stats
    }

    pub fn cache_key(&self, request: &ChatRequest) -> CacheKey {
        CacheKey::new(
            self.backend.backend_id(),
            self.backend.model_id(),
            request.temperature,
            request.schema,
            &request.system_text,
            &request.user_text,
            PROMPT_VERSION,
        )
    }

    /// Sends `request` and returns a schema-valid outcome, re-asking with a
    /// repair note when the reply does not validate.
    pub fn complete_json(&self, request: &ChatRequest) -> Result<ChatOutcome, GatewayError> {
        bump(&self.stats.requests);
        let key = self.cache.as_ref().map(|_| self.cache_key(request));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(hit) = cache.get(key) {
                if hit.parsed_value.schema() == request.schema {
                    bump(&self.stats.cache_hits);
                    return Ok(hit);
                }
            }
        }

        let mut prompt_tokens = None;
        let mut output_tokens = 0;
        let mut user_text = request.user_text.clone();
        let mut last_violation = String::new();
        let mut last_raw = String::new();
        let attempts_allowed = self.retry.schema_attempts.max(1);
        for attempt in 1..=attempts_allowed {
            let reply = self.send(request, &user_text)?;
            let estimate =
                self.tokenizer.count(&request.system_text) + self.tokenizer.count(&user_text);
            let used = match reply.prompt_tokens {
                Some(reported) => {
                    bump(&self.stats.usage_reported);
                    self.stats
                        .reported_prompt_tokens
                        .fetch_add(reported, Ordering::Relaxed);
                    self.stats
                        .estimated_prompt_tokens
                        .fetch_add(estimate, Ordering::Relaxed);
                    reported
                }
                None => {
                    bump(&self.stats.usage_estimated);
                    estimate
                }
            };
            prompt_tokens.get_or_insert(used);
            output_tokens += reply
                .output_tokens
                .unwrap_or_else(|| self.tokenizer.count(&reply.text));

            match schema::validate(request.schema, &reply.text) {
                Ok(parsed_value) => {
                    let outcome = ChatOutcome {
                        parsed_value,
                        raw_text: reply.text,
                        prompt_tokens: prompt_tokens.unwrap_or(0),
                        output_tokens,
                        attempts: attempt,
                    };
                    if let (Some(cache), Some(key)) = (&self.cache, &key) {
                        // A failed cache write only costs a future re-query.
                        let _ = cache.put(key, &outcome);
                    }
                    return Ok(outcome);
                }
                Err(violation) => {
                    if attempt < attempts_allowed {
                        bump(&self.stats.repairs);
                        user_text = repair_prompt(&request.user_text, request.schema, &violation);
                    }
                    last_violation = violation;
                    last_raw = reply.text;
                }
            }
        }
        bump(&self.stats.parse_exhausted);
        Err(GatewayError::ParseExhausted {
            schema: request.schema,
            attempts: attempts_allowed,
            violation: last_violation,
            last_raw,
            prompt_tokens: prompt_tokens.unwrap_or(0),
        })
    }

    fn send(&self, request: &ChatRequest, user_text: &str) -> Result<BackendReply, GatewayError> {
        let breq = BackendRequest {
            system_text: &request.system_text,
            user_text,
            schema: request.schema,
            temperature: request.temperature,
            max_output_tokens: request.max_output_tokens,
        };
        let mut tries = 0;
        loop {
            tries += 1;
            bump(&self.stats.backend_calls);
            let result = {
                let _guard = self.in_flight.as_ref().map(InFlight::acquire);
                self.backend.complete(&breq)
            };
            match result {
                Ok(reply) => return Ok(reply),
                Err(e) if e.retryable && tries <= self.retry.transport_retries => {
                    bump(&self.stats.transport_retries);
                    std::thread::sleep(self.retry.backoff(tries - 1));
                }
                Err(e) => {
                    return Err(GatewayError::BackendUnavailable {
                        attempts: tries,
                        message: e.message,
                    })
                }
            }
        }
    }
}

/// Anything that can answer a schema-constrained request. Implemented by
/// [`Gateway`]; wrappers use it to observe or redirect traffic.
pub trait ChatClient: Sync {
    fn request(&self, user_text: String, schema: SchemaId) -> ChatRequest;
    fn complete_json(&self, request: &ChatRequest) -> Result<ChatOutcome, GatewayError>;
}

impl ChatClient for Gateway {
    fn request(&self, user_text: String, schema: SchemaId) -> ChatRequest {
        Gateway::request(self, user_text, schema)
    }

    fn complete_json(&self, request: &ChatRequest) -> Result<ChatOutcome, GatewayError> {
        Gateway::complete_json(self, request)
    }
}

/// The original prompt followed by a note naming the violation and
/// restating the schema.
pub fn repair_prompt(user_text: &str, schema: SchemaId, violation: &str) -> String {
    format!(
        "{user_text}\n\nYour previous reply was invalid: {violation}.\nReply again with a single JSON object and nothing else, matching this schema: {}",
        schema.shape()
    )
}
