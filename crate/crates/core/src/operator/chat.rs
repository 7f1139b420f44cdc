//! Chat-completions client with retry, transcript logging and replay.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompts::TemplateId;
use super::OperatorError;

pub const DEFAULT_API_KEY_ENV: &str = "LAYERPRUNE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Full URL of the chat-completions route.
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer credential.
    pub api_key_env: String,
    pub temperature: f64,
    /// Overrides the size-derived default when set.
    pub max_tokens: Option<usize>,
    pub timeout: Duration,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            temperature: 1.0,
            max_tokens: None,
            timeout: Duration::from_secs(120),
        }
    }
}

/// Token budget for a response holding `count` configs of `n` rates.
pub fn default_max_tokens(n_layers: usize, count: usize) -> usize {
    16 * n_layers * count + 256
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: u32,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_secs(1),
            factor: 2,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Wait before attempt `attempt + 1`, given `attempt` already failed.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay * self.factor.saturating_pow(attempt.saturating_sub(1))
    }
}

/// One completed request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub endpoint_url: String,
    pub model_name: String,
    pub request_body: Value,
    pub response_text: String,
    pub attempt: u32,
    pub latency_ms: u64,
}

pub fn request_body(model: &str, prompt: &str, temperature: f64, max_tokens: usize) -> Value {
    json!({
        "model": model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": temperature,
        "max_tokens": max_tokens,
    })
}

/// First choice's message content from a chat-completions response body.
pub fn extract_content(body: &str) -> Result<String, OperatorError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| OperatorError::Parse(format!("response is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| OperatorError::Parse("response lacks choices[0].message.content".into()))
}

/// Single-turn completion backend.
pub trait ChatClient {
    fn complete(
        &mut self,
        template: TemplateId,
        prompt: &str,
        max_tokens: usize,
    ) -> Result<ChatExchange, OperatorError>;
}

/// One JSONL transcript record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub template_id: TemplateId,
    pub rendered_prompt: String,
    pub response_text: String,
    pub attempt: u32,
    pub latency_ms: u64,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TranscriptLog {
    path: PathBuf,
}

impl TranscriptLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &TranscriptEntry) -> Result<(), OperatorError> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let line = serde_json::to_string(entry).expect("transcript entry serializes");
        writeln!(f, "{line}")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<TranscriptEntry>, OperatorError> {
        let text = fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| OperatorError::Parse(format!("transcript line {}: {e}", i + 1)))
            })
            .collect()
    }
}

enum AttemptError {
    Retryable(String),
    Fatal(OperatorError),
}

/// Blocking HTTP client for chat-completions endpoints.
pub struct HttpChatClient {
    endpoint: EndpointConfig,
    api_key: String,
    retry: RetryPolicy,
    transcript: Option<TranscriptLog>,
    agent: ureq::Agent,
}

impl HttpChatClient {
    /// Reads the credential from `endpoint.api_key_env`.
    pub fn from_env(endpoint: EndpointConfig) -> Result<Self, OperatorError> {
        let key = std::env::var(&endpoint.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| OperatorError::MissingCredential(endpoint.api_key_env.clone()))?;
        Ok(Self::new(endpoint, key))
    }

    pub fn new(endpoint: EndpointConfig, api_key: String) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(endpoint.timeout))
            .build()
            .into();
        Self {
            endpoint,
            api_key,
            retry: RetryPolicy::default(),
            transcript: None,
            agent,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_transcript(mut self, log: TranscriptLog) -> Self {
        self.transcript = Some(log);
        self
    }

    fn attempt(&self, body: &Value) -> Result<String, AttemptError> {
        let response = self
            .agent
            .post(&self.endpoint.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body);
        let mut response = match response {
            Ok(r) => r,
            Err(e) => return Err(AttemptError::Retryable(format!("transport: {e}"))),
        };
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| AttemptError::Retryable(format!("reading body: {e}")))?;
        match status {
            200..=299 => extract_content(&text).map_err(AttemptError::Fatal),
            429 | 500..=599 => Err(AttemptError::Retryable(format!("HTTP {status}"))),
            _ => Err(AttemptError::Fatal(OperatorError::Http { status, body: text })),
        }
    }

    fn log(&self, template: TemplateId, prompt: &str, response: &str, attempt: u32, latency: u64, error: Option<String>) {
        if let Some(t) = &self.transcript {
            let entry = TranscriptEntry {
                template_id: template,
                rendered_prompt: prompt.to_owned(),
                response_text: response.to_owned(),
                attempt,
                latency_ms: latency,
                timestamp: chrono::Utc::now().to_rfc3339(),
                error,
            };
            if let Err(e) = t.append(&entry) {
                log::error!("cannot append transcript {}: {e}", t.path().display());
            }
        }
    }
}

impl ChatClient for HttpChatClient {
    fn complete(
        &mut self,
        template: TemplateId,
        prompt: &str,
        max_tokens: usize,
    ) -> Result<ChatExchange, OperatorError> {
        let max_tokens = self.endpoint.max_tokens.unwrap_or(max_tokens);
        let body = request_body(&self.endpoint.model, prompt, self.endpoint.temperature, max_tokens);
        let start = Instant::now();
        let mut attempt = 0;
        let outcome = loop {
            attempt += 1;
            match self.attempt(&body) {
                Ok(text) => break Ok(text),
                Err(AttemptError::Fatal(e)) => break Err(e),
                Err(AttemptError::Retryable(cause)) => {
                    if attempt >= self.retry.max_attempts {
                        break Err(OperatorError::Exhausted { attempts: attempt, cause });
                    }
                    log::warn!("{template} attempt {attempt} failed ({cause}); retrying");
                    thread::sleep(self.retry.delay_after(attempt));
                }
            }
        };
        let latency_ms = start.elapsed().as_millis() as u64;
        match outcome {
            Ok(response_text) => {
                self.log(template, prompt, &response_text, attempt, latency_ms, None);
                Ok(ChatExchange {
                    endpoint_url: self.endpoint.url.clone(),
                    model_name: self.endpoint.model.clone(),
                    request_body: body,
                    response_text,
                    attempt,
                    latency_ms,
                })
            }
            Err(e) => {
                self.log(template, prompt, "", attempt, latency_ms, Some(e.to_string()));
                Err(e)
            }
        }
    }
}

/// Serves recorded exchanges in order; prompts must match the recording.
pub struct ReplayChatClient {
    entries: Vec<TranscriptEntry>,
    cursor: usize,
}

impl ReplayChatClient {
    pub fn new(entries: Vec<TranscriptEntry>) -> Self {
        Self { entries, cursor: 0 }
    }

    pub fn from_path(path: &Path) -> Result<Self, OperatorError> {
        Ok(Self::new(TranscriptLog::read(path)?))
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.cursor
    }
}

impl ChatClient for ReplayChatClient {
    fn complete(
        &mut self,
        template: TemplateId,
        prompt: &str,
        _max_tokens: usize,
    ) -> Result<ChatExchange, OperatorError> {
        let index = self.cursor;
        let entry = self.entries.get(index).ok_or(OperatorError::ReplayExhausted)?;
        if entry.template_id != template || entry.rendered_prompt != prompt {
            return Err(OperatorError::ReplayMismatch { index });
        }
        self.cursor += 1;
        if let Some(err) = &entry.error {
            return Err(OperatorError::Exhausted {
                attempts: entry.attempt,
                cause: format!("recorded failure: {err}"),
            });
        }
        Ok(ChatExchange {
            endpoint_url: "replay".into(),
            model_name: "replay".into(),
            request_body: Value::Null,
            response_text: entry.response_text.clone(),
            attempt: entry.attempt,
            latency_ms: entry.latency_ms,
        })
    }
}
