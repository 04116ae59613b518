use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatRequest, RawCompletion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    /// Header carrying the secret, e.g. `Authorization` or `api-key`.
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    /// Prefix placed before the secret (`Bearer` for OpenAI-style servers).
    #[serde(default = "default_auth_scheme")]
    pub auth_scheme: Option<String>,
    /// Environment variable holding the secret. Unset means no auth header.
    #[serde(default)]
    pub secret_env: Option<String>,
    #[serde(default)]
    pub extra_headers: Vec<(String, String)>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_auth_header() -> String {
    "Authorization".to_string()
}

fn default_auth_scheme() -> Option<String> {
    Some("Bearer".to_string())
}

fn default_timeout() -> u64 {
    120
}

impl HttpBackendConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            auth_header: default_auth_header(),
            auth_scheme: default_auth_scheme(),
            secret_env: None,
            extra_headers: Vec::new(),
            timeout_secs: default_timeout(),
        }
    }
}

/// OpenAI-compatible chat-completions client: POSTs
/// `{model, messages:[{role, content}], temperature, max_tokens}` and reads
/// `choices[0].message.content` and `usage`.
pub struct HttpBackend {
    id: String,
    config: HttpBackendConfig,
    secret: Option<String>,
    client: Client,
}

impl HttpBackend {
    pub fn new(id: impl Into<String>, config: HttpBackendConfig) -> Result<Self, BackendError> {
        let secret = match &config.secret_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            id: id.into(),
            config,
            secret,
            client,
        })
    }

    fn classify(status: StatusCode, body: &str) -> BackendError {
        let snippet: String = body.chars().take(300).collect();
        let message = format!("HTTP {status}: {snippet}");
        match status {
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => BackendError::Auth(message),
            StatusCode::PAYMENT_REQUIRED => BackendError::Quota(message),
            StatusCode::TOO_MANY_REQUESTS if body.contains("insufficient_quota") => {
                BackendError::Quota(message)
            }
            StatusCode::TOO_MANY_REQUESTS | StatusCode::REQUEST_TIMEOUT => {
                BackendError::Transient(message)
            }
            s if s.is_server_error() => BackendError::Transient(message),
            _ => BackendError::Fatal(message),
        }
    }
}

pub(super) fn parse_completion(body: &Value) -> Result<RawCompletion, BackendError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Fatal("response has no choices[0].message.content".into()))?;
    let usage = match (
        body.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
        body.pointer("/usage/completion_tokens").and_then(Value::as_u64),
    ) {
        (Some(p), Some(c)) => Some((p, c)),
        _ => None,
    };
    Ok(RawCompletion {
        text: text.to_string(),
        usage,
        latency_ms: None,
    })
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest) -> Result<RawCompletion, BackendError> {
        let payload = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        });
        let mut builder = self.client.post(&self.config.endpoint).json(&payload);
        if let Some(secret) = &self.secret {
            let value = match &self.config.auth_scheme {
                Some(scheme) => format!("{scheme} {secret}"),
                None => secret.clone(),
            };
            builder = builder.header(self.config.auth_header.as_str(), value);
        }
        for (name, value) in &self.config.extra_headers {
            builder = builder.header(name.as_str(), value.as_str());
        }
        let response = builder
            .send()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        if !status.is_success() {
            return Err(Self::classify(status, &body));
        }
        let value: Value = serde_json::from_str(&body)
            .map_err(|e| BackendError::Fatal(format!("invalid JSON body: {e}")))?;
        parse_completion(&value)
    }
}
