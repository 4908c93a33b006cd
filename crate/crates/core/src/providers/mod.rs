//! Chat-completion clients behind one [`Provider`] trait.
//!
//! [`Client`] adds the response cache, retries with exponential backoff and
//! a per-provider rate limit on top of a raw [`Backend`]. Two backends ship:
//! an OpenAI-style HTTP endpoint and a deterministic mock that answers from
//! gold distributions passed through a [`MockDistortion`].

mod cache;
mod http;
mod limiter;
mod mock;

pub use cache::{cache_key, ResponseCache};
pub use http::HttpBackend;
pub use limiter::{Clock, FakeClock, RateLimiter, SystemClock, WINDOW};
pub use mock::{exaggerate_group, mock_distort, render_percentages, MockBackend, MockDistortion, NoiseKey};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::GoldTable;
use crate::opinion::GroupKey;

pub const DEFAULT_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("provider call failed after {attempts} attempt(s): {message}")]
    Provider { attempts: u32, message: String },
    #[error("API key environment variable `{0}` is not set")]
    Auth(String),
    #[error("provider does not support log-probabilities")]
    LogprobsUnsupported,
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("cache error: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    HttpChat,
    Mock,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_timeout_secs() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub model_id: String,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// `None` disables rate limiting.
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    #[serde(default)]
    pub supports_logprobs: bool,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    /// Mock only.
    #[serde(default)]
    pub distortion: Option<MockDistortion>,
}

impl ProviderConfig {
    pub fn mock(model_id: impl Into<String>, distortion: MockDistortion) -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            model_id: model_id.into(),
            endpoint_url: None,
            api_key_env: None,
            temperature: DEFAULT_TEMPERATURE,
            max_retries: 0,
            requests_per_minute: None,
            supports_logprobs: true,
            backoff_base_ms: default_backoff_ms(),
            timeout_secs: default_timeout_secs(),
            max_tokens: None,
            distortion: Some(distortion),
        }
    }

    pub fn http(model_id: impl Into<String>, endpoint_url: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        ProviderConfig {
            kind: ProviderKind::HttpChat,
            endpoint_url: Some(endpoint_url.into()),
            api_key_env: Some(api_key_env.into()),
            max_retries: default_retries(),
            supports_logprobs: false,
            distortion: None,
            ..Self::mock(model_id, MockDistortion::identity(0))
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ProviderError> {
        let config: ProviderConfig = toml::from_str(text).map_err(|e| ProviderError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: &str| Err(ProviderError::InvalidConfig(m.to_string()));
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if self.model_id.trim().is_empty() {
            return bad("model_id is required");
        }
        if self.requests_per_minute == Some(0) {
            return bad("requests_per_minute must be >= 1");
        }
        match self.kind {
            ProviderKind::HttpChat => {
                if self.endpoint_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
                    return bad("http_chat requires endpoint_url");
                }
            }
            ProviderKind::Mock => {
                if let Some(d) = &self.distortion {
                    d.validate()?;
                }
            }
        }
        Ok(())
    }
}

/// What the caller expects back; used by the mock to shape its answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseFormat {
    Distribution,
    Choice,
}

/// Which survey cell a request is about. Not part of the cache key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestContext {
    pub question_id: String,
    pub group: GroupKey,
    pub k: usize,
    pub format: ResponseFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub sample_index: u32,
    /// Candidate continuations to score instead of generating text.
    pub logprobs_for: Option<Vec<String>>,
    pub context: Option<RequestContext>,
}

/// The part of a completion that is cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedCompletion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<BTreeMap<String, f64>>,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResponse {
    pub text: String,
    pub logprobs: Option<BTreeMap<String, f64>>,
    pub model_id: String,
    pub from_cache: bool,
    pub attempts: u32,
}

/// Failure of a single backend call.
#[derive(Debug, Clone, PartialEq)]
pub struct CallError {
    pub retryable: bool,
    pub message: String,
    pub auth: Option<String>,
}

impl CallError {
    pub fn retryable(message: impl Into<String>) -> Self {
        CallError {
            retryable: true,
            message: message.into(),
            auth: None,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        CallError {
            retryable: false,
            message: message.into(),
            auth: None,
        }
    }
}

/// One raw call to a model, without caching or retries.
pub trait Backend: Send + Sync {
    fn call(&self, request: &CompletionRequest) -> Result<CachedCompletion, CallError>;
}

pub trait Provider: Send + Sync {
    fn model_id(&self) -> &str;
    fn supports_logprobs(&self) -> bool;
    fn temperature(&self) -> f64;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError>;
}

pub struct Client {
    config: ProviderConfig,
    backend: Box<dyn Backend>,
    cache: Option<ResponseCache>,
    limiter: Option<RateLimiter>,
    clock: Arc<dyn Clock>,
    calls: AtomicU64,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client")
            .field("model_id", &self.config.model_id)
            .field("kind", &self.config.kind)
            .finish()
    }
}

impl Client {
    pub fn new(
        config: ProviderConfig,
        backend: Box<dyn Backend>,
        cache_dir: Option<&Path>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ProviderError> {
        config.validate()?;
        let cache = cache_dir.map(|dir| ResponseCache::new(dir, &config.model_id));
        let limiter = config
            .requests_per_minute
            .map(|rpm| RateLimiter::new(rpm, clock.clone()));
        Ok(Client {
            config,
            backend,
            cache,
            limiter,
            clock,
            calls: AtomicU64::new(0),
        })
    }

    /// Builds the backend named by `config.kind`. Mocks need the gold table.
    pub fn from_config(
        config: ProviderConfig,
        gold: Option<Arc<GoldTable>>,
        cache_dir: Option<&Path>,
    ) -> Result<Self, ProviderError> {
        config.validate()?;
        let backend: Box<dyn Backend> = match config.kind {
            ProviderKind::HttpChat => Box::new(HttpBackend::new(&config)?),
            ProviderKind::Mock => {
                let gold = gold.ok_or_else(|| ProviderError::InvalidConfig("mock provider needs a gold table".into()))?;
                let distortion = config.distortion.clone().unwrap_or_else(|| MockDistortion::identity(0));
                Box::new(MockBackend::new(gold, distortion).with_model_id(config.model_id.clone()))
            }
        };
        Self::new(config, backend, cache_dir, Arc::new(SystemClock::default()))
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    /// Backend invocations so far (cache hits excluded).
    pub fn network_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn cache_dir(&self) -> Option<PathBuf> {
        self.cache.as_ref().map(|c| c.dir().to_path_buf())
    }

    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.config.backoff_base_ms.saturating_mul(1u64 << attempt.min(16)))
    }
}

impl Provider for Client {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn supports_logprobs(&self) -> bool {
        self.config.supports_logprobs
    }

    fn temperature(&self) -> f64 {
        self.config.temperature
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        if request.logprobs_for.is_some() && !self.config.supports_logprobs {
            return Err(ProviderError::LogprobsUnsupported);
        }
        let key = cache_key(&self.config.model_id, request);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(CompletionResponse {
                text: hit.text,
                logprobs: hit.logprobs,
                model_id: hit.model_id,
                from_cache: true,
                attempts: 0,
            });
        }
        let max_attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..max_attempts {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            self.calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.call(request) {
                Ok(completion) => {
                    if let Some(cache) = &self.cache {
                        cache.put(&key, request, &completion)?;
                    }
                    return Ok(CompletionResponse {
                        text: completion.text,
                        logprobs: completion.logprobs,
                        model_id: completion.model_id,
                        from_cache: false,
                        attempts: attempt + 1,
                    });
                }
                Err(CallError { auth: Some(var), .. }) => return Err(ProviderError::Auth(var)),
                Err(e) if !e.retryable => {
                    return Err(ProviderError::Provider {
                        attempts: attempt + 1,
                        message: e.message,
                    })
                }
                Err(e) => {
                    log::debug!("{} attempt {} failed: {}", self.config.model_id, attempt + 1, e.message);
                    last = e.message;
                    if attempt + 1 < max_attempts {
                        self.clock.sleep(self.backoff(attempt));
                    }
                }
            }
        }
        Err(ProviderError::Provider {
            attempts: max_attempts,
            message: last,
        })
    }
}

impl<P: Provider + ?Sized> Provider for Arc<P> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn supports_logprobs(&self) -> bool {
        (**self).supports_logprobs()
    }
    fn temperature(&self) -> f64 {
        (**self).temperature()
    }
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        (**self).complete(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<Result<CachedCompletion, CallError>>>,
    }

    impl Backend for Scripted {
        fn call(&self, _: &CompletionRequest) -> Result<CachedCompletion, CallError> {
            self.replies.lock().unwrap().remove(0)
        }
    }

    fn ok(text: &str) -> Result<CachedCompletion, CallError> {
        Ok(CachedCompletion {
            text: text.into(),
            logprobs: None,
            model_id: "m".into(),
        })
    }

    fn request(prompt: &str) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.into(),
            temperature: 0.7,
            sample_index: 0,
            logprobs_for: None,
            context: None,
        }
    }

    fn client(replies: Vec<Result<CachedCompletion, CallError>>, retries: u32, cache: Option<&Path>) -> (Client, Arc<FakeClock>) {
        let clock = Arc::new(FakeClock::default());
        let mut config = ProviderConfig::mock("m", MockDistortion::identity(0));
        config.max_retries = retries;
        config.backoff_base_ms = 100;
        config.supports_logprobs = false;
        let backend = Box::new(Scripted {
            replies: Mutex::new(replies),
        });
        (Client::new(config, backend, cache, clock.clone()).unwrap(), clock)
    }

    #[test]
    fn second_identical_request_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let (c, _) = client(vec![ok("[50, 50]")], 0, Some(dir.path()));
        let first = c.complete(&request("p")).unwrap();
        let second = c.complete(&request("p")).unwrap();
        assert!(!first.from_cache && second.from_cache);
        assert_eq!(first.text, second.text);
        assert_eq!(c.network_calls(), 1);
        let key = cache_key("m", &request("p"));
        assert!(dir.path().join("m").join(format!("{key}.json")).exists());
    }

    #[test]
    fn cache_key_covers_every_field() {
        let base = request("p");
        let k = cache_key("m", &base);
        assert_ne!(k, cache_key("other", &base));
        let mut r = base.clone();
        r.temperature = 0.0;
        assert_ne!(k, cache_key("m", &r));
        let mut r = base.clone();
        r.sample_index = 1;
        assert_ne!(k, cache_key("m", &r));
        let mut r = base.clone();
        r.logprobs_for = Some(vec!["1".into()]);
        assert_ne!(k, cache_key("m", &r));
        let mut r = base.clone();
        r.context = Some(RequestContext {
            question_id: "q".into(),
            group: GroupKey::all(),
            k: 2,
            format: ResponseFormat::Choice,
        });
        assert_eq!(k, cache_key("m", &r));
    }

    #[test]
    fn retries_with_exponential_backoff() {
        let (c, clock) = client(
            vec![Err(CallError::retryable("503")), Err(CallError::retryable("503")), ok("3")],
            3,
            None,
        );
        let r = c.complete(&request("p")).unwrap();
        assert_eq!(r.attempts, 3);
        assert_eq!(clock.sleeps(), vec![Duration::from_millis(100), Duration::from_millis(200)]);
    }

    #[test]
    fn gives_up_after_retries() {
        let (c, _) = client(vec![Err(CallError::retryable("a")), Err(CallError::retryable("b"))], 1, None);
        assert_eq!(
            c.complete(&request("p")),
            Err(ProviderError::Provider {
                attempts: 2,
                message: "b".into()
            })
        );
        let (c, _) = client(vec![Err(CallError::fatal("400")), ok("x")], 5, None);
        assert!(matches!(c.complete(&request("p")), Err(ProviderError::Provider { attempts: 1, .. })));
    }

    #[test]
    fn logprobs_gate() {
        let (c, _) = client(vec![ok("x")], 0, None);
        let mut r = request("p");
        r.logprobs_for = Some(vec!["1".into(), "2".into()]);
        assert_eq!(c.complete(&r), Err(ProviderError::LogprobsUnsupported));
        assert_eq!(c.network_calls(), 0);
    }

    #[test]
    fn config_validation_and_toml() {
        let text = r#"
            kind = "http_chat"
            model_id = "gpt-x"
            endpoint_url = "https://example.invalid/v1/chat/completions"
            api_key_env = "EXAMPLE_KEY"
            requests_per_minute = 30
        "#;
        let c = ProviderConfig::from_toml_str(text).unwrap();
        assert_eq!(c.temperature, DEFAULT_TEMPERATURE);
        assert_eq!(c.max_retries, 3);
        assert!(ProviderConfig::from_toml_str("kind = \"http_chat\"\nmodel_id = \"m\"").is_err());
        assert!(ProviderConfig::from_toml_str("kind = \"mock\"\nmodel_id = \"m\"\ntemperature = -1.0").is_err());
        let mock = r#"
            kind = "mock"
            model_id = "mock-sharp"
            [distortion]
            gamma = 2.0
            noise_scale = 0.05
            seed = 3
        "#;
        let c = ProviderConfig::from_toml_str(mock).unwrap();
        assert_eq!(c.distortion.unwrap().gamma, 2.0);
    }
}
