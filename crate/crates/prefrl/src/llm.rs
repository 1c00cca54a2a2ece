//! Chat-completions client for preference queries: bounded concurrency,
//! exponential backoff on transient failures, bounded re-asks on malformed
//! answers, and a digest-keyed cache that also deduplicates concurrent
//! identical queries.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use prefrl_core::interpreter::{render, TrajectorySummary};
use prefrl_core::oracle::{build_prompt, parse_answer, PreferenceLabel, PreferenceTriple, PromptBundle, Provenance};
use prefrl_core::ConstraintSpec;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cache::{prompt_digest, CacheError, CacheRecord, PromptCache};

/// Environment variable holding the bearer token, unless overridden.
pub const DEFAULT_TOKEN_ENV: &str = "PREFRL_API_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_inflight: usize,
    /// Attempts per request on network errors, 429 and 5xx.
    pub max_attempts: u32,
    /// Queries per pair before a malformed answer discards the pair.
    pub malformed_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_secs: u64,
    pub token_env: String,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            endpoint: "http://localhost:8000/v1".into(),
            model: "mixtral-8x7b-instruct".into(),
            temperature: 0.0,
            max_inflight: 4,
            max_attempts: 5,
            malformed_attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
            timeout_secs: 120,
            token_env: DEFAULT_TOKEN_ENV.into(),
        }
    }
}

impl EndpointConfig {
    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.endpoint.trim_end_matches('/'))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_inflight == 0 || self.max_attempts == 0 || self.malformed_attempts == 0 {
            return Err("max_inflight, max_attempts and malformed_attempts must be positive".into());
        }
        if self.endpoint.is_empty() || self.model.is_empty() {
            return Err("endpoint and model must be set".into());
        }
        Ok(())
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Minimal HTTP surface so tests can substitute the network.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> Result<HttpResponse, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().http_status_as_error(false).timeout_global(Some(timeout)).build();
        UreqTransport { agent: config.into() }
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> Result<HttpResponse, String> {
        let mut request = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request.send(body).map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("endpoint unavailable after {attempts} attempts: {last_error}")]
    Unavailable { attempts: u32, last_error: String },
    #[error("cache error: {0}")]
    Cache(String),
}

impl From<CacheError> for LlmError {
    fn from(e: CacheError) -> Self {
        LlmError::Cache(e.to_string())
    }
}

/// Result of one preference query.
#[derive(Debug, Clone, PartialEq)]
pub enum LlmAnswer {
    Label { label: PreferenceLabel, raw: String },
    /// Every attempt was unparseable; the pair must be dropped.
    Discarded { raw: String },
}

struct Semaphore {
    free: Mutex<usize>,
    cond: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { free: Mutex::new(n), cond: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cond.wait(free).expect("limiter lock");
        }
        *free -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.cond.notify_one();
    }
}

type Pending = Arc<OnceLock<Result<LlmAnswer, LlmError>>>;

pub struct LlmOracle {
    config: EndpointConfig,
    token: Option<String>,
    transport: Box<dyn Transport>,
    cache: PromptCache,
    limiter: Semaphore,
    pending: Mutex<HashMap<String, Pending>>,
    requests: AtomicU64,
}

impl LlmOracle {
    /// Oracle over the real network; the token is read from
    /// `config.token_env`.
    pub fn connect(config: EndpointConfig, cache: PromptCache) -> Self {
        let token = std::env::var(&config.token_env).ok().filter(|t| !t.is_empty());
        let transport = UreqTransport::new(Duration::from_secs(config.timeout_secs));
        Self::with_transport(config, token, Box::new(transport), cache)
    }

    pub fn with_transport(config: EndpointConfig, token: Option<String>, transport: Box<dyn Transport>, cache: PromptCache) -> Self {
        let limiter = Semaphore::new(config.max_inflight.max(1));
        LlmOracle { config, token, transport, cache, limiter, pending: Mutex::new(HashMap::new()), requests: AtomicU64::new(0) }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn cache(&self) -> &PromptCache {
        &self.cache
    }

    /// HTTP requests issued so far, retries included.
    pub fn network_requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn query(&self, bundle: &PromptBundle) -> Result<LlmAnswer, LlmError> {
        let prompt = bundle.full_text();
        let digest = prompt_digest(&self.config.model, &prompt);
        if let Some(record) = self.cache.get(&digest) {
            return Ok(answer_from_record(&record));
        }
        let cell = self.pending.lock().expect("pending lock").entry(digest.clone()).or_default().clone();
        let result = cell.get_or_init(|| self.fetch(bundle, &prompt)).clone();
        self.pending.lock().expect("pending lock").remove(&digest);
        result
    }

    /// Renders both summaries, queries, and packages the triple. `Ok(None)`
    /// means the pair was discarded.
    pub fn compare(
        &self,
        a: &TrajectorySummary,
        b: &TrajectorySummary,
        constraint: Option<&ConstraintSpec>,
    ) -> Result<Option<PreferenceTriple>, LlmError> {
        let bundle = build_prompt(a.task, constraint, &render(a), &render(b));
        Ok(match self.query(&bundle)? {
            LlmAnswer::Label { label, raw } => Some(PreferenceTriple {
                summary_a: *a,
                summary_b: *b,
                mu: label,
                provenance: Provenance::Llm { model_id: self.config.model.clone() },
                raw_response: Some(raw),
            }),
            LlmAnswer::Discarded { .. } => None,
        })
    }

    fn fetch(&self, bundle: &PromptBundle, prompt: &str) -> Result<LlmAnswer, LlmError> {
        let mut last = String::new();
        for attempt in 0..self.config.malformed_attempts {
            last = self.request(bundle)?;
            if let Ok(label) = parse_answer(&last) {
                self.cache.insert(CacheRecord::new(&self.config.model, prompt, last.clone(), Some(label.mu())))?;
                return Ok(LlmAnswer::Label { label, raw: last });
            }
            log::warn!("malformed oracle answer (attempt {} of {})", attempt + 1, self.config.malformed_attempts);
        }
        self.cache.insert(CacheRecord::new(&self.config.model, prompt, last.clone(), None))?;
        Ok(LlmAnswer::Discarded { raw: last })
    }

    /// One chat completion with backoff; returns the first choice's content.
    fn request(&self, bundle: &PromptBundle) -> Result<String, LlmError> {
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": bundle.system_message()},
                {"role": "user", "content": bundle.user_message()},
            ],
            "temperature": self.config.temperature,
        })
        .to_string();
        let url = self.config.url();
        let _slot = self.limiter.acquire();
        let mut last_error = String::new();
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff(attempt - 1));
            }
            self.requests.fetch_add(1, Ordering::SeqCst);
            match self.transport.post_json(&url, self.token.as_deref(), &body) {
                Ok(resp) if (200..300).contains(&resp.status) => match completion_content(&resp.body) {
                    Some(content) => return Ok(content),
                    None => last_error = "response has no choices[0].message.content".into(),
                },
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    last_error = format!("HTTP {}", resp.status);
                }
                Ok(resp) => {
                    return Err(LlmError::Unavailable {
                        attempts: attempt + 1,
                        last_error: format!("HTTP {}: {}", resp.status, truncate(&resp.body, 200)),
                    })
                }
                Err(e) => last_error = e,
            }
            log::warn!("oracle request failed ({last_error}), attempt {} of {}", attempt + 1, self.config.max_attempts);
        }
        Err(LlmError::Unavailable { attempts: self.config.max_attempts, last_error })
    }
}

fn answer_from_record(record: &CacheRecord) -> LlmAnswer {
    match record.mu.and_then(|mu| PreferenceLabel::try_from(mu).ok()) {
        Some(label) => LlmAnswer::Label { label, raw: record.response.clone() },
        None => LlmAnswer::Discarded { raw: record.response.clone() },
    }
}

fn completion_content(body: &str) -> Option<String> {
    let value: serde_json::Value = serde_json::from_str(body).ok()?;
    value.pointer("/choices/0/message/content")?.as_str().map(str::to_owned)
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
