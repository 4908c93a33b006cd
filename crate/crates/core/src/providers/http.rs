//! OpenAI-style chat-completions backend. Wire fields are listed in
//! `docs/providers.md`.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{Backend, CachedCompletion, CallError, CompletionRequest, ProviderConfig, ProviderError};

/// How many alternatives to ask for when scoring answer tokens.
pub const TOP_LOGPROBS: u32 = 20;

#[derive(Debug)]
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model_id: String,
    api_key_env: Option<String>,
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    model: Option<String>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Vec<TokenLogprob>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

impl HttpBackend {
    pub fn new(config: &ProviderConfig) -> Result<Self, ProviderError> {
        let endpoint = config
            .endpoint_url
            .clone()
            .ok_or_else(|| ProviderError::InvalidConfig("http_chat requires endpoint_url".into()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::InvalidConfig(e.to_string()))?;
        Ok(HttpBackend {
            client,
            endpoint,
            model_id: config.model_id.clone(),
            api_key_env: config.api_key_env.clone(),
            max_tokens: config.max_tokens,
        })
    }

    fn body(&self, request: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": self.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
        });
        if request.logprobs_for.is_some() {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(TOP_LOGPROBS);
            body["max_tokens"] = json!(1);
        } else if let Some(max) = self.max_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }
}

/// Keeps the best log-probability seen for each candidate among the first
/// generated token and its alternatives.
fn candidate_logprobs(first: &TokenLogprob, candidates: &[String]) -> BTreeMap<String, f64> {
    let mut table = BTreeMap::new();
    let seen = std::iter::once((first.token.as_str(), first.logprob))
        .chain(first.top_logprobs.iter().map(|t| (t.token.as_str(), t.logprob)));
    for (token, lp) in seen {
        let token = token.trim();
        if let Some(c) = candidates.iter().find(|c| c.as_str() == token) {
            let slot = table.entry(c.clone()).or_insert(f64::NEG_INFINITY);
            if lp > *slot {
                *slot = lp;
            }
        }
    }
    table
}

impl Backend for HttpBackend {
    fn call(&self, request: &CompletionRequest) -> Result<CachedCompletion, CallError> {
        let mut builder = self.client.post(&self.endpoint).json(&self.body(request));
        if let Some(var) = &self.api_key_env {
            let key = std::env::var(var).map_err(|_| CallError {
                retryable: false,
                message: format!("environment variable {var} is not set"),
                auth: Some(var.clone()),
            })?;
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| CallError::retryable(format!("transport: {e}")))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(CallError::retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(CallError::fatal(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>())));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| CallError::retryable(format!("malformed response body: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| CallError::retryable("response has no choices"))?;
        let logprobs = request.logprobs_for.as_ref().map(|candidates| {
            choice
                .logprobs
                .as_ref()
                .and_then(|l| l.content.first())
                .map(|first| candidate_logprobs(first, candidates))
                .unwrap_or_default()
        });
        Ok(CachedCompletion {
            text: choice.message.content.unwrap_or_default(),
            logprobs,
            model_id: parsed.model.unwrap_or_else(|| self.model_id.clone()),
        })
    }
}
