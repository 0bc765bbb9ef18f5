//! Inference backends: a deterministic offline mock and a chat-completions
//! HTTP client.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::prompt::PromptEnvelope;
use crate::masker::default_masker;

/// Environment variable holding the API credential for the HTTP backend.
pub const API_KEY_ENV: &str = "CELERLOG_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Completion {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Timeouts, dropped connections, 429 and 5xx. Retried, then rolled back.
    #[error("transport: {0}")]
    Transport(String),
    /// Bad credentials, unknown model and the like. Aborts the run.
    #[error("configuration: {0}")]
    Config(String),
}

/// One call per request; implementations report token usage.
pub trait InferenceBackend: Send + Sync {
    fn infer(&self, envelope: &PromptEnvelope) -> Result<Completion, BackendError>;
}

impl<T: InferenceBackend + ?Sized> InferenceBackend for &T {
    fn infer(&self, envelope: &PromptEnvelope) -> Result<Completion, BackendError> {
        (**self).infer(envelope)
    }
}

impl<T: InferenceBackend + ?Sized> InferenceBackend for Box<T> {
    fn infer(&self, envelope: &PromptEnvelope) -> Result<Completion, BackendError> {
        (**self).infer(envelope)
    }
}

/// Variables the mock reports for one message: tokens with a digit and
/// tokens any mask rule matches.
pub fn mock_variables(message: &str) -> Vec<String> {
    let masker = default_masker();
    message
        .split_whitespace()
        .filter(|t| t.bytes().any(|b| b.is_ascii_digit()) || masker.classify(t).is_some())
        .map(str::to_owned)
        .collect()
}

/// Answers in the expected line format for the envelope's messages.
pub fn mock_infer(envelope: &PromptEnvelope) -> String {
    envelope
        .messages
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let vars = serde_json::to_string(&mock_variables(m)).expect("strings serialize");
            format!("{}: {vars}\n", i + 1)
        })
        .collect()
}

/// Offline backend. Token usage is the rendered prompt's character count
/// divided by four; there is no completion charge.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    latency: Duration,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sleeps this long per request, to stand in for network latency.
    pub fn with_latency(latency: Duration) -> Self {
        MockBackend { latency }
    }
}

impl InferenceBackend for MockBackend {
    fn infer(&self, envelope: &PromptEnvelope) -> Result<Completion, BackendError> {
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        Ok(Completion {
            text: mock_infer(envelope),
            prompt_tokens: (envelope.render().chars().count() / 4) as u64,
            completion_tokens: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

/// Chat-completions client. Temperature is always 0.
#[derive(Debug)]
pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        if config.endpoint.is_empty() {
            return Err(BackendError::Config("endpoint URL is required".into()));
        }
        if config.model.is_empty() {
            return Err(BackendError::Config("model name is required".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend { config, agent })
    }

    /// Request body sent for one envelope.
    pub fn request_body(&self, envelope: &PromptEnvelope) -> serde_json::Value {
        json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {
                    "role": "system",
                    "content": format!("{}\n\n{}", envelope.task_description, envelope.constraints),
                },
                {
                    "role": "user",
                    "content": format!("{}\n{}", envelope.examples, envelope.payload),
                },
            ],
        })
    }
}

impl InferenceBackend for HttpBackend {
    fn infer(&self, envelope: &PromptEnvelope) -> Result<Completion, BackendError> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(self.request_body(envelope))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => {}
            408 | 429 | 500..=599 => {
                return Err(BackendError::Transport(format!("HTTP {status}")));
            }
            _ => {
                let body = resp.body_mut().read_to_string().unwrap_or_default();
                return Err(BackendError::Config(format!("HTTP {status}: {body}")));
            }
        }
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Transport(format!("bad response body: {e}")))?;
        let usage = parsed.usage.unwrap_or_default();
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        Ok(Completion {
            text,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        })
    }
}
