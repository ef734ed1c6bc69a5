//! Chat-completions over HTTP.
//!
//! Requests:
//!
//! - `POST {base_url}/chat/completions` with
//!   `{"model","messages":[{"role","content"}..],"temperature","top_p","max_tokens"}`,
//!   reply text at `choices[0].message.content`.
//! - `POST {base_url}/embeddings` with `{"model","input":[..]}`, vectors at
//!   `data[i].embedding`.
//!
//! Auth is a bearer token read from the environment variable named by the
//! endpoint's `api_key_ref`.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::Value;

use super::{
    check_embed_input, ChatBackend, ClientError, CompletionResult, DecodingParams, Embedder,
    EmbeddingMatrix, ModelEndpoint,
};
use crate::prompting::{Message, PromptBundle};

const BODY_EXCERPT: usize = 512;

/// Exponential backoff: `base`, `2·base`, `4·base`, ... capped at `cap`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub cap: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            cap: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.min(31)).unwrap_or(u32::MAX);
        self.base.saturating_mul(factor).min(self.cap)
    }
}

#[derive(Debug, Default)]
pub struct HttpBackend {
    retry: RetryPolicy,
    agents: Mutex<HashMap<u64, ureq::Agent>>,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

impl HttpBackend {
    pub fn new(retry: RetryPolicy) -> Self {
        Self {
            retry,
            agents: Mutex::default(),
        }
    }

    fn agent(&self, timeout: Duration) -> ureq::Agent {
        let key = timeout.as_nanos() as u64;
        let mut agents = self.agents.lock().unwrap();
        agents
            .entry(key)
            .or_insert_with(|| {
                ureq::Agent::new_with_config(
                    ureq::Agent::config_builder()
                        .timeout_global(Some(timeout))
                        .http_status_as_error(false)
                        .build(),
                )
            })
            .clone()
    }

    fn post_once(
        &self,
        endpoint: &ModelEndpoint,
        path: &str,
        body: &str,
    ) -> Result<Value, ClientError> {
        let url = format!("{}/{}", endpoint.base_url.trim_end_matches('/'), path);
        let mut req = self
            .agent(endpoint.timeout())
            .post(&url)
            .header("Content-Type", "application/json");
        if let Some(var) = &endpoint.api_key_ref {
            let key = std::env::var(var).map_err(|_| {
                ClientError::InvalidRequest(format!("environment variable {var} is not set"))
            })?;
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body)
            .map_err(|e| map_transport_error(e, endpoint.timeout()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| map_transport_error(e, endpoint.timeout()))?;
        if !(200..300).contains(&status) {
            let body: String = text.chars().take(BODY_EXCERPT).collect();
            return Err(ClientError::HttpStatus { code: status, body });
        }
        serde_json::from_str(&text)
            .map_err(|e| ClientError::MalformedResponse(format!("invalid JSON: {e}")))
    }

    /// POST with retries on transient failures. Gives up early when the next
    /// backoff would push past `timeout × (max_retries + 1)` overall.
    fn post(&self, endpoint: &ModelEndpoint, path: &str, body: &str) -> Result<Value, ClientError> {
        let budget = endpoint.timeout().saturating_mul(endpoint.max_retries + 1);
        let start = Instant::now();
        let mut attempt = 0;
        loop {
            match self.post_once(endpoint, path, body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt < endpoint.max_retries => {
                    let wait = self.retry.delay(attempt);
                    if start.elapsed() + wait > budget {
                        return Err(e);
                    }
                    log::debug!(
                        "{}: {e}; retry {} in {:?}",
                        endpoint.model_id,
                        attempt + 1,
                        wait
                    );
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn map_transport_error(err: ureq::Error, timeout: Duration) -> ClientError {
    match err {
        ureq::Error::Timeout(_) => ClientError::Timeout(timeout),
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => {
            ClientError::Timeout(timeout)
        }
        ureq::Error::BadUri(u) => ClientError::InvalidRequest(format!("bad URI {u}")),
        other => ClientError::Network(other.to_string()),
    }
}

pub(crate) fn chat_request_body(
    endpoint: &ModelEndpoint,
    bundle: &PromptBundle,
    params: &DecodingParams,
) -> String {
    serde_json::to_string(&ChatRequest {
        model: &endpoint.model_id,
        messages: &bundle.messages,
        temperature: params.temperature,
        top_p: params.top_p,
        max_tokens: params.max_tokens,
        seed: params.seed,
    })
    .expect("serializable request")
}

fn parse_chat_reply(reply: &Value) -> Result<(String, Option<u64>, Option<u64>), ClientError> {
    let text = reply
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| {
            ClientError::MalformedResponse("missing choices[0].message.content".into())
        })?;
    let usage = |k: &str| reply.get("usage").and_then(|u| u.get(k)).and_then(Value::as_u64);
    Ok((
        text.to_string(),
        usage("prompt_tokens"),
        usage("completion_tokens"),
    ))
}

fn parse_embedding_reply(reply: &Value, expected: usize) -> Result<EmbeddingMatrix, ClientError> {
    let data = reply
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| ClientError::MalformedResponse("missing data array".into()))?;
    if data.len() != expected {
        return Err(ClientError::MalformedResponse(format!(
            "expected {expected} embeddings, got {}",
            data.len()
        )));
    }
    // Servers may return rows out of order; `index` is authoritative when present.
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; expected];
    for (pos, item) in data.iter().enumerate() {
        let idx = item
            .get("index")
            .and_then(Value::as_u64)
            .map(|i| i as usize)
            .unwrap_or(pos);
        let vec = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| ClientError::MalformedResponse(format!("data[{pos}].embedding missing")))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| ClientError::MalformedResponse("non-numeric component".into()))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let slot = rows
            .get_mut(idx)
            .ok_or_else(|| ClientError::MalformedResponse(format!("index {idx} out of range")))?;
        *slot = Some(vec);
    }
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| ClientError::MalformedResponse(format!("row {i} missing"))))
        .collect::<Result<Vec<_>, _>>()?;
    EmbeddingMatrix::new(rows)
}

impl ChatBackend for HttpBackend {
    fn complete(
        &self,
        endpoint: &ModelEndpoint,
        bundle: &PromptBundle,
        params: &DecodingParams,
    ) -> Result<CompletionResult, ClientError> {
        if bundle.messages.is_empty() {
            return Err(ClientError::InvalidRequest("prompt has no messages".into()));
        }
        let body = chat_request_body(endpoint, bundle, params);
        let start = Instant::now();
        let reply = self.post(endpoint, "chat/completions", &body)?;
        let (text, prompt_tokens, completion_tokens) = parse_chat_reply(&reply)?;
        Ok(CompletionResult {
            text,
            prompt_tokens,
            completion_tokens,
            latency_ms: start.elapsed().as_millis() as u64,
            model_id: endpoint.model_id.clone(),
        })
    }
}

/// Embeddings from an HTTP endpoint.
#[derive(Debug)]
pub struct HttpEmbedder {
    endpoint: ModelEndpoint,
    backend: HttpBackend,
}

impl HttpEmbedder {
    pub fn new(endpoint: ModelEndpoint, backend: HttpBackend) -> Self {
        Self { endpoint, backend }
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix, ClientError> {
        check_embed_input(texts)?;
        let body = serde_json::to_string(&EmbeddingRequest {
            model: &self.endpoint.model_id,
            input: texts,
        })
        .expect("serializable request");
        let reply = self.backend.post(&self.endpoint, "embeddings", &body)?;
        parse_embedding_reply(&reply, texts.len())
    }
}
