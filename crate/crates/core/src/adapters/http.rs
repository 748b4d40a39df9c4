//! Blocking chat-completions client shared by every remote adapter.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::{StatusCode, Url};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AdapterError;

const EXCERPT_CHARS: usize = 200;
const MAX_BACKOFF: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer credential, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles on every further retry.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_concurrency() -> usize {
    8
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            max_concurrency: default_concurrency(),
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        let url = Url::parse(&self.base_url)
            .map_err(|e| AdapterError::Config(format!("base_url {:?}: {e}", self.base_url)))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(AdapterError::Config(format!("base_url {:?} must be http(s)", self.base_url)));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(AdapterError::Config(format!("timeout_secs must be > 0, got {}", self.timeout_secs)));
        }
        if self.max_concurrency == 0 {
            return Err(AdapterError::Config("max_concurrency must be >= 1".into()));
        }
        if self.model_name.is_empty() {
            return Err(AdapterError::Config("model_name is empty".into()));
        }
        Ok(())
    }

    /// Short stable digest of the fields that determine responses; the
    /// credential itself is never included.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.base_url.trim_end_matches('/').as_bytes());
        h.update([0]);
        h.update(self.model_name.as_bytes());
        hex::encode(&h.finalize()[..8])
    }

    fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(20)).unwrap_or(u64::MAX);
        Duration::from_millis(self.backoff_ms.saturating_mul(factor)).min(MAX_BACKOFF)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: usize,
    pub n: usize,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub logprobs: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct TokenLogprob {
    pub logprob: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct ChoiceLogprobs {
    #[serde(default)]
    pub content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct ResponseMessage {
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ChatChoice {
    #[serde(default)]
    pub index: usize,
    pub message: ResponseMessage,
    #[serde(default)]
    pub logprobs: Option<ChoiceLogprobs>,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

impl ChatChoice {
    pub fn text(&self) -> &str {
        self.message.content.as_deref().unwrap_or("")
    }

    /// Mean per-token log-probability, when the server returned any.
    pub fn mean_logprob(&self) -> Option<f64> {
        let tokens = self.logprobs.as_ref()?.content.as_ref()?;
        if tokens.is_empty() {
            return None;
        }
        Some(tokens.iter().map(|t| t.logprob).sum::<f64>() / tokens.len() as f64)
    }

    fn logprob_len(&self) -> Option<u64> {
        Some(self.logprobs.as_ref()?.content.as_ref()?.len() as u64)
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ChatResponse {
    #[serde(default)]
    pub choices: Vec<ChatChoice>,
    #[serde(default)]
    pub usage: Option<Usage>,
}

impl ChatResponse {
    /// Splits reported completion usage across choices so the parts sum to
    /// the reported total. Per-choice logprob lengths are used when they
    /// account for the total exactly; otherwise the total is spread evenly.
    pub fn tokens_per_choice(&self) -> Vec<u64> {
        let k = self.choices.len() as u64;
        if k == 0 {
            return Vec::new();
        }
        let total = self.usage.as_ref().map_or(0, |u| u.completion_tokens);
        let lens: Option<Vec<u64>> = self.choices.iter().map(ChatChoice::logprob_len).collect();
        if let Some(lens) = lens {
            if lens.iter().sum::<u64>() == total {
                return lens;
            }
        }
        (0..k).map(|i| total / k + u64::from(i < total % k)).collect()
    }
}

pub(crate) fn excerpt(body: &str) -> String {
    let mut s: String = body.chars().take(EXCERPT_CHARS).collect();
    if body.chars().count() > EXCERPT_CHARS {
        s.push_str("...");
    }
    s
}

struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Chat-completions client with bounded in-flight requests and retries on
/// transport errors, 429 and 5xx.
pub struct ChatClient {
    config: EndpointConfig,
    url: Url,
    api_key: Option<String>,
    http: Client,
    permits: Permits,
    attempts: AtomicU64,
}

impl ChatClient {
    pub fn new(config: EndpointConfig) -> Result<Self, AdapterError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| AdapterError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let url = Url::parse(&format!("{}/chat/completions", config.base_url.trim_end_matches('/')))
            .map_err(|e| AdapterError::Config(e.to_string()))?;
        let http = Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| AdapterError::Config(format!("http client: {e}")))?;
        let permits = Permits { free: Mutex::new(config.max_concurrency), cv: Condvar::new() };
        Ok(ChatClient { config, url, api_key, http, permits, attempts: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// HTTP attempts made so far, retries included.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    pub fn request(&self, messages: Vec<ChatMessage>, n: usize, temperature: f64, max_tokens: usize) -> ChatRequest {
        ChatRequest {
            model: self.config.model_name.clone(),
            messages,
            temperature,
            max_tokens,
            n,
            logprobs: false,
            stop: Vec::new(),
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, AdapterError> {
        let body = self.post(&serde_json::to_value(request).expect("request serializes"))?;
        serde_json::from_str(&body).map_err(|e| AdapterError::Parse { message: e.to_string(), excerpt: excerpt(&body) })
    }

    /// POSTs `body` and returns the raw response text of the first 2xx reply.
    pub fn post(&self, body: &serde_json::Value) -> Result<String, AdapterError> {
        let _permit = self.permits.acquire();
        let total = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=total {
            if attempt > 1 {
                thread::sleep(self.config.backoff(attempt - 2));
            }
            self.attempts.fetch_add(1, Ordering::Relaxed);
            let mut req = self.http.post(self.url.clone()).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status.is_success() {
                        return Ok(text);
                    }
                    if !retriable(status) {
                        return Err(AdapterError::Http { status: status.as_u16(), excerpt: excerpt(&text) });
                    }
                    last = format!("HTTP {status}: {}", excerpt(&text));
                }
                Err(e) => last = e.to_string(),
            }
            log::debug!("{} attempt {attempt}/{total} failed: {last}", self.url);
        }
        Err(AdapterError::Transport { attempts: total, message: last })
    }
}

fn retriable(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
}
