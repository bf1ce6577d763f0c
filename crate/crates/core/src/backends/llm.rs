//! Hosted language-model completion with a replayable prompt cache.
//!
//! Cache layout: one `{sha256(prompt)}.json` file per prompt holding
//! `{prompt, response, model_id, timestamp}`. Entries are write-once, so
//! concurrent writers racing on the same prompt keep the first response.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{BackendError, SimpleTokenizer, Tokenizer};

pub const API_KEY_ENV: &str = "RECAP_LLM_API_KEY";
pub const BASE_URL_ENV: &str = "RECAP_LLM_BASE_URL";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("prompt has {tokens} tokens, context limit is {limit}")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("backend unavailable after {attempts} attempts: {message}")]
    BackendUnavailable { attempts: u32, message: String },
}

/// Raw transport to a completion model. No caching or retrying here.
pub trait CompletionBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn max_context_tokens(&self) -> usize;
    fn send(&self, prompt: &str) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestPolicy {
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub backoff_base_ms: u64,
}

impl Default for RequestPolicy {
    fn default() -> Self {
        Self { timeout_secs: 120, max_retries: 3, max_in_flight: 4, backoff_base_ms: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt: String,
    pub response: String,
    pub model_id: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone)]
pub struct PromptCache {
    dir: PathBuf,
}

impl PromptCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(prompt: &str) -> String {
        hex::encode(Sha256::digest(prompt.as_bytes()))
    }

    fn path(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.json", Self::key(prompt)))
    }

    pub fn get(&self, prompt: &str) -> Option<CacheEntry> {
        let raw = fs::read_to_string(self.path(prompt)).ok()?;
        let entry: CacheEntry = serde_json::from_str(&raw).ok()?;
        (entry.prompt == prompt).then_some(entry)
    }

    /// Stores an entry unless one already exists for the prompt.
    pub fn put(&self, entry: &CacheEntry) -> std::io::Result<()> {
        let target = self.path(&entry.prompt);
        if target.exists() {
            return Ok(());
        }
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(serde_json::to_string(entry)?.as_bytes())?;
        match tmp.persist_noclobber(&target) {
            Ok(_) => Ok(()),
            Err(e) if target.exists() => {
                drop(e);
                Ok(())
            }
            Err(e) => Err(e.error),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub network_calls: usize,
    pub cache_hits: usize,
    pub failures: usize,
}

/// Cached, retrying, concurrency-bounded completion client.
pub struct LlmClient {
    backend: Box<dyn CompletionBackend>,
    tokenizer: Arc<dyn Tokenizer>,
    cache: Option<PromptCache>,
    policy: RequestPolicy,
    network_calls: AtomicUsize,
    cache_hits: AtomicUsize,
    failures: AtomicUsize,
}

impl LlmClient {
    pub fn new(backend: Box<dyn CompletionBackend>) -> Self {
        Self {
            backend,
            tokenizer: Arc::new(SimpleTokenizer),
            cache: None,
            policy: RequestPolicy::default(),
            network_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
            failures: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: PromptCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_policy(mut self, policy: RequestPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    pub fn max_context_tokens(&self) -> usize {
        self.backend.max_context_tokens()
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            network_calls: self.network_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            failures: self.failures.load(Ordering::SeqCst),
        }
    }

    pub fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let tokens = self.tokenizer.count(prompt);
        let limit = self.backend.max_context_tokens();
        if tokens > limit {
            return Err(LlmError::ContextOverflow { tokens, limit });
        }
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(prompt)) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit.response);
        }
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.send(prompt) {
                Ok(response) => {
                    if let Some(cache) = &self.cache {
                        let entry = CacheEntry {
                            prompt: prompt.to_string(),
                            response: response.clone(),
                            model_id: self.backend.model_id().to_string(),
                            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
                        };
                        if let Err(e) = cache.put(&entry) {
                            log::warn!("failed to write prompt cache entry: {e}");
                        }
                    }
                    return Ok(response);
                }
                Err(e) if attempt > self.policy.max_retries => {
                    self.failures.fetch_add(1, Ordering::SeqCst);
                    return Err(LlmError::BackendUnavailable { attempts: attempt, message: e.to_string() });
                }
                Err(e) => {
                    log::debug!("attempt {attempt} failed: {e}");
                    let wait = self.policy.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                    if wait > 0 {
                        std::thread::sleep(Duration::from_millis(wait));
                    }
                }
            }
        }
    }

    /// Completes every prompt with at most `max_in_flight` concurrent requests.
    /// Results are returned in input order.
    pub fn complete_many(&self, prompts: &[String]) -> Vec<Result<String, LlmError>> {
        let workers = self.policy.max_in_flight.max(1).min(prompts.len().max(1));
        if workers <= 1 {
            return prompts.iter().map(|p| self.complete(p)).collect();
        }
        let next = AtomicUsize::new(0);
        let mut results: Vec<Option<Result<String, LlmError>>> = vec![None; prompts.len()];
        let collected = std::sync::Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= prompts.len() {
                        break;
                    }
                    let r = self.complete(&prompts[i]);
                    collected.lock().expect("result lock poisoned")[i] = Some(r);
                });
            }
        });
        results.into_iter().map(|r| r.expect("every prompt processed")).collect()
    }
}

type Responder = dyn Fn(&str) -> Result<String, BackendError> + Send + Sync;

/// In-process fake whose responses come from a closure.
pub struct ScriptedBackend {
    model_id: String,
    max_context_tokens: usize,
    responder: Box<Responder>,
}

impl ScriptedBackend {
    pub fn new<F>(model_id: impl Into<String>, max_context_tokens: usize, responder: F) -> Self
    where
        F: Fn(&str) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        Self { model_id: model_id.into(), max_context_tokens, responder: Box::new(responder) }
    }

    /// Always answers with the same text.
    pub fn canned(response: impl Into<String>) -> Self {
        let response = response.into();
        Self::new("scripted", 16_000, move |_| Ok(response.clone()))
    }
}

impl CompletionBackend for ScriptedBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn max_context_tokens(&self) -> usize {
        self.max_context_tokens
    }

    fn send(&self, prompt: &str) -> Result<String, BackendError> {
        (self.responder)(prompt)
    }
}

/// Cache-only backend: every network request fails, so a run either replays
/// completely from cache or reports which prompts are missing.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    model_id: String,
    max_context_tokens: usize,
}

impl ReplayBackend {
    pub fn new(model_id: impl Into<String>, max_context_tokens: usize) -> Self {
        Self { model_id: model_id.into(), max_context_tokens }
    }
}

impl CompletionBackend for ReplayBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn max_context_tokens(&self) -> usize {
        self.max_context_tokens
    }

    fn send(&self, _prompt: &str) -> Result<String, BackendError> {
        Err(BackendError::Unavailable("replay mode: prompt not in cache".into()))
    }
}

/// OpenAI-compatible chat-completions endpoint. The credential is read from
/// `RECAP_LLM_API_KEY`; `RECAP_LLM_BASE_URL` overrides the endpoint root.
pub struct OpenAiChatBackend {
    model: String,
    max_context_tokens: usize,
    endpoint: String,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl OpenAiChatBackend {
    pub fn from_env(model: impl Into<String>, max_context_tokens: usize, timeout: Duration) -> Result<Self, BackendError> {
        let api_key = std::env::var(API_KEY_ENV)
            .map_err(|_| BackendError::Unavailable(format!("{API_KEY_ENV} is not set")))?;
        let base = std::env::var(BASE_URL_ENV).unwrap_or_else(|_| "https://api.openai.com/v1".to_string());
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self {
            model: model.into(),
            max_context_tokens,
            endpoint: format!("{}/chat/completions", base.trim_end_matches('/')),
            api_key,
            http,
        })
    }
}

impl CompletionBackend for OpenAiChatBackend {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn max_context_tokens(&self) -> usize {
        self.max_context_tokens
    }

    fn send(&self, prompt: &str) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let resp = self
            .http
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = resp.status();
        let value: serde_json::Value = resp.json().map_err(|e| BackendError::Failure(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Unavailable(format!("HTTP {status}: {value}")));
        }
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Failure(format!("unexpected response shape: {value}")))
    }
}
