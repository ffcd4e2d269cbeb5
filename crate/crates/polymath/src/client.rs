//! OpenAI-compatible chat-completions client.

use std::time::{Duration, Instant};

use polymath_core::llm::{BackendError, ChatBackend, ChatRequest, ChatResponse, RetryPolicy, Retrying, Role, TokenUsage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const API_KEY_ENV: &str = "POLYMATH_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub base_url: String,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self { base_url: "https://api.openai.com/v1".into(), timeout_secs: 120, retry: RetryPolicy::default() }
    }
}

pub struct OpenAiClient {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
}

impl OpenAiClient {
    pub fn new(cfg: &ClientConfig, api_key: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let endpoint = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
        Self { agent, endpoint, api_key: api_key.into() }
    }

    /// Reads the bearer token from `POLYMATH_API_KEY`.
    pub fn from_env(cfg: &ClientConfig) -> Result<Self, BackendError> {
        match std::env::var(API_KEY_ENV) {
            Ok(key) if !key.trim().is_empty() => Ok(Self::new(cfg, key.trim())),
            _ => Err(BackendError::Auth(format!("{API_KEY_ENV} is not set"))),
        }
    }
}

fn wire_body(request: &ChatRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            json!({ "role": role, "content": m.content })
        })
        .collect();
    let mut body = json!({ "model": request.model, "messages": messages, "temperature": request.temperature });
    if let Some(max) = request.max_tokens {
        body["max_tokens"] = json!(max);
    }
    body
}

fn classify(status: u16, body: &str) -> BackendError {
    let detail = format!("HTTP {status}: {}", body.chars().take(300).collect::<String>());
    match status {
        401 | 403 => BackendError::Auth(detail),
        408 | 409 | 429 | 500..=599 => BackendError::Transport(detail),
        _ => BackendError::InvalidRequest(detail),
    }
}

fn parse_completion(body: &Value) -> Result<(String, TokenUsage), BackendError> {
    let content = body["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| BackendError::Transport("response has no choices[0].message.content".into()))?;
    let usage = TokenUsage {
        prompt_tokens: body["usage"]["prompt_tokens"].as_u64().unwrap_or(0) as u32,
        completion_tokens: body["usage"]["completion_tokens"].as_u64().unwrap_or(0) as u32,
    };
    Ok((content.to_owned(), usage))
}

impl ChatBackend for OpenAiClient {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let started = Instant::now();
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(wire_body(request))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(classify(status, &text));
        }
        let body: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Transport(format!("response is not JSON: {e}")))?;
        let (content, usage) = parse_completion(&body)?;
        Ok(ChatResponse { content, usage, latency_ms: started.elapsed().as_millis() as u64 })
    }
}

/// Sleeps on the current thread between retries.
pub fn thread_sleep(d: Duration) {
    std::thread::sleep(d);
}

pub type LiveBackend = Retrying<OpenAiClient, fn(Duration)>;

/// The client from the environment, wrapped in transport retries.
pub fn live_backend(cfg: &ClientConfig) -> Result<LiveBackend, BackendError> {
    Ok(Retrying::new(OpenAiClient::from_env(cfg)?, cfg.retry, thread_sleep as fn(Duration)))
}
