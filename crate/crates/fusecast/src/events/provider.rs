//! Event providers: the trait, a fixture-backed mock, and an HTTP client.
//!
//! The mock is a pure function of (key, fixture map) so every test and the
//! synthetic study are fully deterministic. The live client exists for real
//! deployments only and is never exercised by tests.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::Value;

use super::QueryKey;
use crate::error::{Error, Result};

pub trait EventProvider {
    /// Return the raw response body for one query. The prompt is the fully
    /// rendered text for the representative request behind `key`.
    fn fetch(&self, key: &QueryKey, prompt: &str) -> Result<String>;
}

/// Bounded retries with exponential backoff (base, 2x base, 4x base, ...).
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, backoff_base_ms: 100 }
    }
}

impl RetryPolicy {
    /// No retries, no waiting; the right policy for pure providers.
    pub fn none() -> Self {
        RetryPolicy { max_retries: 0, backoff_base_ms: 0 }
    }

    pub fn run<T>(&self, mut attempt: impl FnMut() -> Result<T>) -> Result<T> {
        let mut tries = 0;
        loop {
            match attempt() {
                Ok(v) => return Ok(v),
                Err(e) if tries < self.max_retries => {
                    let delay = self.backoff_base_ms.saturating_mul(1 << tries.min(16));
                    log::debug!("attempt {} failed ({e}); retrying in {delay} ms", tries + 1);
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    tries += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Fixture-backed provider: canonical key string -> response JSON. Keys
/// absent from the fixture mean "quiet period" and yield an empty Event,
/// so sparse fixtures cover a whole dataset.
#[derive(Debug, Clone, Default)]
pub struct MockProvider {
    responses: BTreeMap<String, Value>,
}

impl MockProvider {
    pub fn from_map(responses: BTreeMap<String, Value>) -> Self {
        MockProvider { responses }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read fixture {}: {e}", path.display())))?;
        let responses: BTreeMap<String, Value> = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("fixture {} is not a JSON map: {e}", path.display())))?;
        Ok(MockProvider { responses })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl EventProvider for MockProvider {
    fn fetch(&self, key: &QueryKey, _prompt: &str) -> Result<String> {
        match self.responses.get(&key.canonical()) {
            Some(value) => Ok(value.to_string()),
            Option::None => Ok(r#"{"Event": ""}"#.to_string()),
        }
    }
}

/// Steady-rate limiter: one token per request, refilled continuously.
/// `acquire` blocks until a token is available.
#[derive(Debug)]
pub struct TokenBucket {
    rate_per_sec: f64,
    burst: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(rate_per_sec: f64, burst: f64) -> Self {
        assert!(rate_per_sec > 0.0 && burst >= 1.0);
        TokenBucket { rate_per_sec, burst, tokens: burst, last: Instant::now() }
    }

    fn refill(&mut self) {
        let now = Instant::now();
        let dt = now.duration_since(self.last).as_secs_f64();
        self.last = now;
        self.tokens = (self.tokens + dt * self.rate_per_sec).min(self.burst);
    }

    pub fn acquire(&mut self) {
        loop {
            self.refill();
            if self.tokens >= 1.0 {
                self.tokens -= 1.0;
                return;
            }
            let deficit = (1.0 - self.tokens) / self.rate_per_sec;
            std::thread::sleep(Duration::from_secs_f64(deficit.min(0.25)));
        }
    }

    /// Try to take a token without blocking.
    pub fn try_acquire(&mut self) -> bool {
        self.refill();
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            true
        } else {
            false
        }
    }
}

/// Connection settings for a live HTTP provider. The auth token is read
/// from the named environment variable, never from the command line.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveProviderConfig {
    pub endpoint: String,
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_requests_per_second")]
    pub requests_per_second: f64,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_base_ms() -> u64 {
    100
}

fn default_requests_per_second() -> f64 {
    2.0
}

impl LiveProviderConfig {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy { max_retries: self.max_retries, backoff_base_ms: self.backoff_base_ms }
    }
}

/// HTTP JSON client: POSTs {"prompt": ...} and returns the body verbatim.
/// Calls are rate-limited through a shared token bucket; retry/backoff is
/// applied by the retrieval layer via `RetryPolicy`.
pub struct LiveProvider {
    endpoint: String,
    auth_token: Option<String>,
    agent: ureq::Agent,
    bucket: Mutex<TokenBucket>,
}

impl LiveProvider {
    pub fn new(config: &LiveProviderConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::config("live provider endpoint is empty"));
        }
        let auth_token = match &config.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::config(format!("auth env var `{var}` is not set"))
            })?),
            Option::None => Option::None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        Ok(LiveProvider {
            endpoint: config.endpoint.clone(),
            auth_token,
            agent,
            bucket: Mutex::new(TokenBucket::new(config.requests_per_second, 1.0)),
        })
    }
}

impl EventProvider for LiveProvider {
    fn fetch(&self, key: &QueryKey, prompt: &str) -> Result<String> {
        self.bucket.lock().expect("token bucket lock").acquire();
        let body = serde_json::json!({ "prompt": prompt, "key": key.canonical() });
        let mut request = self.agent.post(&self.endpoint);
        if let Some(token) = &self.auth_token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| Error::Provider(format!("POST {}: {e}", self.endpoint)))?;
        response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Provider(format!("reading response body: {e}")))
    }
}
