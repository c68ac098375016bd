//! Text generation backends.

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const DEFAULT_MAX_TOKENS: usize = 512;
pub const DEFAULT_TEMPERATURE: f64 = 0.0;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GenerationError {
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("generation timed out")]
    Timeout,
    #[error("generation backend returned status {0}")]
    NonSuccessStatus(u16),
    #[error("malformed generation response: {0}")]
    MalformedResponse(String),
    #[error("generation transport error: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            stop: None,
        }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.max_tokens == 0 {
            return Err(GenerationError::InvalidRequest(
                "max_tokens must be at least 1".into(),
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GenerationError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

pub trait GenerationBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError>;

    fn name(&self) -> &'static str;
}

/// Deterministic backend: `STUB-ANSWER|<context lines>|<first 40 chars of question>`.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubBackend;

const QUESTION_MARKERS: [(&str, &str); 2] = [("The question is: ", "."), ("问题是：", "。")];

fn is_context_line(line: &str) -> bool {
    // "YYYY-MM-DD HH:MM:SS:"
    let b = line.as_bytes();
    if b.len() < 20 {
        return false;
    }
    let digit = |i: usize| b[i].is_ascii_digit();
    (0..4).all(digit)
        && b[4] == b'-'
        && (5..7).all(digit)
        && b[7] == b'-'
        && (8..10).all(digit)
        && b[10] == b' '
        && (11..13).all(digit)
        && b[13] == b':'
        && (14..16).all(digit)
        && b[16] == b':'
        && (17..19).all(digit)
        && b[19] == b':'
}

impl StubBackend {
    pub fn answer(prompt: &str) -> String {
        let context_lines = prompt.lines().filter(|l| is_context_line(l)).count();
        let question = QUESTION_MARKERS
            .iter()
            .filter_map(|(marker, end)| {
                prompt.rfind(marker).map(|pos| {
                    let rest = prompt[pos + marker.len()..].trim_end();
                    rest.strip_suffix(end).unwrap_or(rest).to_string()
                })
            })
            .next()
            .unwrap_or_default();
        let head: String = question.chars().take(40).collect();
        format!("STUB-ANSWER|{context_lines}|{head}")
    }
}

impl GenerationBackend for StubBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        request.validate()?;
        Ok(Self::answer(&request.prompt))
    }

    fn name(&self) -> &'static str {
        "stub"
    }
}

/// POSTs `{prompt, max_tokens, temperature, stop}` and reads `{text}`.
/// A timed-out call is retried once.
pub struct HttpBackend {
    endpoint: String,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, GenerationError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GenerationError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            client,
        })
    }

    fn call(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(request)
            .send()
            .map_err(map_reqwest)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(GenerationError::NonSuccessStatus(status.as_u16()));
        }
        let body = resp.text().map_err(map_reqwest)?;
        let wire: WireResponse = serde_json::from_str(&body)
            .map_err(|e| GenerationError::MalformedResponse(e.to_string()))?;
        Ok(wire.text)
    }
}

fn map_reqwest(e: reqwest::Error) -> GenerationError {
    if e.is_timeout() {
        GenerationError::Timeout
    } else {
        GenerationError::Transport(e.to_string())
    }
}

impl GenerationBackend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        request.validate()?;
        match self.call(request) {
            Err(GenerationError::Timeout) => self.call(request),
            other => other,
        }
    }

    fn name(&self) -> &'static str {
        "http"
    }
}
