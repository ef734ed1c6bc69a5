//! Chat-completion and embedding access.
//!
//! Live models are reached through the de-facto chat-completions wire format
//! (see [`http`]); [`mock::MockBackend`] answers the same calls offline and
//! deterministically. [`Backend`] routes by endpoint URL scheme: `mock://...`
//! goes to the mock, everything else over HTTP.

pub mod http;
pub mod mock;

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::prompting::PromptBundle;

pub use http::{HttpBackend, HttpEmbedder, RetryPolicy};
pub use mock::{MockBackend, MockEmbedder, MOCK_EMBEDDING_DIM};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClientError {
    #[error("network error: {0}")]
    Network(String),
    #[error("HTTP {code}: {body}")]
    HttpStatus { code: u16, body: String },
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

impl ClientError {
    /// Worth retrying: connection trouble, timeouts, 429 and 5xx.
    pub fn is_transient(&self) -> bool {
        match self {
            ClientError::Network(_) | ClientError::Timeout(_) => true,
            ClientError::HttpStatus { code, .. } => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    3
}

fn default_in_flight() -> usize {
    4
}

/// An addressable model. `api_key_ref` names an environment variable; the
/// key itself is never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub model_id: String,
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_ref: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

impl ModelEndpoint {
    pub fn new(model_id: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            base_url: base_url.into(),
            api_key_ref: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
        }
    }

    /// Endpoint served by the offline mock.
    pub fn mock(model_id: impl Into<String>) -> Self {
        let model_id = model_id.into();
        let base_url = format!("mock://{model_id}");
        Self::new(model_id, base_url)
    }

    pub fn is_mock(&self) -> bool {
        self.base_url.starts_with("mock://")
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.model_id.trim().is_empty() {
            return Err("model_id must not be empty".into());
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(format!("timeout_secs must be > 0 (got {})", self.timeout_secs));
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be >= 1".into());
        }
        let url = self.base_url.as_str();
        let rest = url
            .strip_prefix("http://")
            .or_else(|| url.strip_prefix("https://"))
            .or_else(|| url.strip_prefix("mock://"))
            .ok_or_else(|| format!("base_url {url:?} must start with http://, https:// or mock://"))?;
        let host = rest.split('/').next().unwrap_or_default();
        if host.is_empty() || host.contains(char::is_whitespace) {
            return Err(format!("base_url {url:?} has no host"));
        }
        Ok(())
    }
}

fn default_temperature() -> f64 {
    0.7
}

fn default_top_p() -> f64 {
    0.9
}

fn default_max_tokens() -> u32 {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: default_temperature(),
            top_p: default_top_p(),
            max_tokens: default_max_tokens(),
            seed: None,
        }
    }
}

impl DecodingParams {
    /// Returns `(field, bound)` for the first out-of-range parameter.
    pub fn validate(&self) -> Result<(), (&'static str, &'static str)> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(("temperature", "must be >= 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(("top_p", "must be in (0, 1]"));
        }
        if self.max_tokens == 0 {
            return Err(("max_tokens", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub latency_ms: u64,
    pub model_id: String,
}

/// `n` vectors of a shared dimension, all components finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Vec<Vec<f64>>,
    dimension: usize,
}

impl EmbeddingMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, ClientError> {
        let dimension = rows.first().map(Vec::len).unwrap_or(0);
        if dimension == 0 {
            return Err(ClientError::MalformedResponse(
                "embedding rows are empty".into(),
            ));
        }
        for row in &rows {
            if row.len() != dimension {
                return Err(ClientError::DimensionMismatch {
                    expected: dimension,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ClientError::MalformedResponse(
                    "non-finite embedding component".into(),
                ));
            }
        }
        Ok(Self { rows, dimension })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.rows
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        endpoint: &ModelEndpoint,
        bundle: &PromptBundle,
        params: &DecodingParams,
    ) -> Result<CompletionResult, ClientError>;
}

pub trait Embedder: Send + Sync {
    /// One row per input text, in order.
    fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix, ClientError>;

    /// One row per token. Providers with contextual token embeddings
    /// override this; the default embeds every token string on its own.
    fn embed_tokens(&self, tokens: &[String]) -> Result<EmbeddingMatrix, ClientError> {
        self.embed(tokens)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(
        &self,
        endpoint: &ModelEndpoint,
        bundle: &PromptBundle,
        params: &DecodingParams,
    ) -> Result<CompletionResult, ClientError> {
        (**self).complete(endpoint, bundle, params)
    }
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix, ClientError> {
        (**self).embed(texts)
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<EmbeddingMatrix, ClientError> {
        (**self).embed_tokens(tokens)
    }
}

pub(crate) fn check_embed_input(texts: &[String]) -> Result<(), ClientError> {
    if texts.is_empty() {
        return Err(ClientError::InvalidRequest("no texts to embed".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(ClientError::InvalidRequest(format!("text {i} is empty")));
    }
    Ok(())
}

/// Counting semaphore bounding in-flight requests per endpoint.
#[derive(Debug, Default)]
struct Limiter {
    slots: Mutex<HashMap<String, usize>>,
    freed: Condvar,
}

impl Limiter {
    fn acquire(&self, key: &str, limit: usize) {
        let mut slots = self.slots.lock().unwrap();
        loop {
            let used = slots.entry(key.to_string()).or_insert(0);
            if *used < limit {
                *used += 1;
                return;
            }
            slots = self.freed.wait(slots).unwrap();
        }
    }

    fn release(&self, key: &str) {
        let mut slots = self.slots.lock().unwrap();
        if let Some(used) = slots.get_mut(key) {
            *used = used.saturating_sub(1);
        }
        self.freed.notify_all();
    }
}

/// Routes `mock://` endpoints to the mock and everything else over HTTP,
/// holding at most `max_in_flight` concurrent requests per endpoint.
#[derive(Debug)]
pub struct Backend {
    http: HttpBackend,
    mock: MockBackend,
    limiter: Limiter,
}

impl Backend {
    pub fn new(mock_seed: u64) -> Self {
        Self::with_parts(HttpBackend::default(), MockBackend::new(mock_seed))
    }

    pub fn with_parts(http: HttpBackend, mock: MockBackend) -> Self {
        Self {
            http,
            mock,
            limiter: Limiter::default(),
        }
    }
}

impl ChatBackend for Backend {
    fn complete(
        &self,
        endpoint: &ModelEndpoint,
        bundle: &PromptBundle,
        params: &DecodingParams,
    ) -> Result<CompletionResult, ClientError> {
        let key = format!("{}|{}", endpoint.base_url, endpoint.model_id);
        self.limiter.acquire(&key, endpoint.max_in_flight.max(1));
        let out = if endpoint.is_mock() {
            self.mock.complete(endpoint, bundle, params)
        } else {
            self.http.complete(endpoint, bundle, params)
        };
        self.limiter.release(&key);
        out
    }
}

/// Embedding provider for an endpoint spec: mock or HTTP.
pub fn embedder_for(endpoint: &ModelEndpoint, mock_seed: u64) -> Arc<dyn Embedder> {
    if endpoint.is_mock() {
        Arc::new(MockEmbedder::new(mock_seed))
    } else {
        Arc::new(HttpEmbedder::new(endpoint.clone(), HttpBackend::default()))
    }
}
