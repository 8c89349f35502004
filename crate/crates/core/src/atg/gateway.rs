//! LLM access: an OpenAI-compatible chat backend behind an append-only
//! response cache, with retries, a token-bucket rate limit and a bound on
//! concurrent requests.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AtgError;

pub const API_KEY_ENV: &str = "CODER_LLM_API_KEY";
pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_RETRIES: u32 = 3;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

/// One prompt/response round trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub key: String,
    pub model_tag: String,
    pub prompt: String,
    pub response: String,
    pub timestamp: DateTime<Utc>,
    #[serde(skip)]
    pub retrieved_from_cache: bool,
}

/// Cache key: SHA-256 over the model tag and prompt, NUL separated.
pub fn cache_key(model_tag: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(model_tag.as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

pub trait LlmGateway: Send + Sync {
    fn model_tag(&self) -> &str;
    fn query(&self, prompt: &str) -> Result<LlmExchange, AtgError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendError {
    pub message: String,
    pub retryable: bool,
}

impl BackendError {
    pub fn transient(message: impl Into<String>) -> Self {
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

/// Something that can answer a single chat prompt.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, model: &str, prompt: &str) -> Result<String, BackendError>;
}

/// OpenAI-compatible `chat/completions` client.
pub struct OpenAiChat {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    pub temperature: f64,
}

impl OpenAiChat {
    /// `endpoint` is the full URL of the chat-completions route. The API key
    /// is read from `CODER_LLM_API_KEY` when set.
    pub fn new(endpoint: impl Into<String>) -> Result<Self, AtgError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| AtgError::Gateway(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: endpoint.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            temperature: DEFAULT_TEMPERATURE,
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatBackend for OpenAiChat {
    fn complete(&self, model: &str, prompt: &str) -> Result<String, BackendError> {
        let body = ChatRequest {
            model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: self.temperature,
        };
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::transient(format!("request failed: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            let msg = format!("HTTP {status}: {}", text.chars().take(300).collect::<String>());
            return Err(if status.as_u16() == 429 || status.is_server_error() {
                BackendError::transient(msg)
            } else {
                BackendError::fatal(msg)
            });
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| BackendError::transient(format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::transient("response has no message content"))
    }
}

/// Append-only JSON-lines store of exchanges, keyed by [`cache_key`].
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, LlmExchange>>,
    writer: Mutex<Option<File>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Loads an existing file (if any). A torn final line is ignored; any
    /// other malformed line is an error. The first entry for a key wins.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, AtgError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let lines: Vec<String> = BufReader::new(File::open(&path)?)
                .lines()
                .collect::<Result<_, _>>()?;
            let last = lines.len();
            for (n, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<LlmExchange>(line) {
                    Ok(ex) => {
                        entries.entry(ex.key.clone()).or_insert(ex);
                    }
                    Err(e) if n + 1 == last => {
                        tracing::warn!(path = %path.display(), "ignoring torn last cache line: {e}");
                    }
                    Err(e) => {
                        return Err(AtgError::Cache(format!(
                            "{}:{}: {e}",
                            path.display(),
                            n + 1
                        )))
                    }
                }
            }
        }
        Ok(Self {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(None),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<LlmExchange> {
        self.entries.read().unwrap().get(key).cloned()
    }

    /// Records an exchange; each record is one `write` of a full line.
    pub fn insert(&self, ex: LlmExchange) -> Result<(), AtgError> {
        let mut writer = self.writer.lock().unwrap();
        if self.entries.read().unwrap().contains_key(&ex.key) {
            return Ok(());
        }
        if let Some(path) = &self.path {
            if writer.is_none() {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                *writer = Some(OpenOptions::new().create(true).append(true).open(path)?);
            }
            let mut line = serde_json::to_vec(&ex)?;
            line.push(b'\n');
            let f = writer.as_mut().unwrap();
            f.write_all(&line)?;
            f.flush()?;
        }
        self.entries.write().unwrap().insert(ex.key.clone(), ex);
        Ok(())
    }
}

/// Token bucket: `burst` tokens, refilled at `per_second`.
pub struct RateLimiter {
    per_second: f64,
    burst: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(per_second: f64, burst: u32) -> Self {
        let burst = f64::from(burst.max(1));
        Self {
            per_second,
            burst,
            state: Mutex::new((burst, Instant::now())),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(f64::INFINITY, 1)
    }

    pub fn acquire(&self) {
        if self.per_second.is_infinite() {
            return;
        }
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap();
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.per_second).min(self.burst);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.per_second
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Counting semaphore bounding concurrent backend calls.
struct InFlight {
    max: usize,
    used: Mutex<usize>,
    cv: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.max {
            used = self.cv.wait(used).unwrap();
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: DEFAULT_RETRIES,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Cache-first gateway. Without a backend (offline) a miss is an error.
pub struct CachedGateway {
    model_tag: String,
    backend: Option<Box<dyn ChatBackend>>,
    cache: ResponseCache,
    retry: RetryPolicy,
    limiter: RateLimiter,
    in_flight: InFlight,
}

impl CachedGateway {
    pub fn new(model_tag: impl Into<String>, backend: Box<dyn ChatBackend>, cache: ResponseCache) -> Self {
        Self {
            model_tag: model_tag.into(),
            backend: Some(backend),
            cache,
            retry: RetryPolicy::default(),
            limiter: RateLimiter::new(2.0, DEFAULT_MAX_IN_FLIGHT as u32),
            in_flight: InFlight {
                max: DEFAULT_MAX_IN_FLIGHT,
                used: Mutex::new(0),
                cv: Condvar::new(),
            },
        }
    }

    pub fn offline(model_tag: impl Into<String>, cache: ResponseCache) -> Self {
        Self {
            backend: None,
            ..Self::new(model_tag, Box::new(NoBackend), cache)
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, limiter: RateLimiter) -> Self {
        self.limiter = limiter;
        self
    }

    pub fn with_max_in_flight(mut self, max: usize) -> Self {
        self.in_flight.max = max.max(1);
        self
    }

    pub fn is_offline(&self) -> bool {
        self.backend.is_none()
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    fn call_backend(&self, backend: &dyn ChatBackend, prompt: &str) -> Result<String, AtgError> {
        let mut last = String::new();
        for attempt in 0..=self.retry.retries {
            if attempt > 0 {
                let delay = self.retry.base_delay * 2u32.pow(attempt - 1);
                std::thread::sleep(delay);
            }
            self.limiter.acquire();
            let result = {
                let _slot = self.in_flight.acquire();
                backend.complete(&self.model_tag, prompt)
            };
            match result {
                Ok(text) if !text.trim().is_empty() => return Ok(text),
                Ok(_) => last = "empty response".into(),
                Err(e) if e.retryable => last = e.message,
                Err(e) => return Err(AtgError::Gateway(e.message)),
            }
            tracing::warn!(attempt, error = %last, "LLM request failed");
        }
        Err(AtgError::Gateway(format!(
            "giving up after {} attempts: {last}",
            self.retry.retries + 1
        )))
    }
}

struct NoBackend;

impl ChatBackend for NoBackend {
    fn complete(&self, _: &str, _: &str) -> Result<String, BackendError> {
        Err(BackendError::fatal("offline"))
    }
}

impl LlmGateway for CachedGateway {
    fn model_tag(&self) -> &str {
        &self.model_tag
    }

    fn query(&self, prompt: &str) -> Result<LlmExchange, AtgError> {
        let key = cache_key(&self.model_tag, prompt);
        if let Some(mut ex) = self.cache.get(&key) {
            ex.retrieved_from_cache = true;
            return Ok(ex);
        }
        let backend = self.backend.as_deref().ok_or_else(|| AtgError::OfflineMiss {
            prompt: prompt.to_string(),
        })?;
        let response = self.call_backend(backend, prompt)?;
        let ex = LlmExchange {
            key,
            model_tag: self.model_tag.clone(),
            prompt: prompt.to_string(),
            response,
            timestamp: Utc::now(),
            retrieved_from_cache: false,
        };
        self.cache.insert(ex.clone())?;
        Ok(ex)
    }
}
