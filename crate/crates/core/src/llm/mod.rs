//! Access to chat-completion and embedding backends.
//!
//! Every backend implements [`ChatBackend`]; the [`Gateway`] adds request
//! validation and the retry policy on top. Offline runs use
//! [`ReplayBackend`], which answers from a fixture file keyed by the SHA-256
//! of the canonical request JSON.

mod embed;
mod http;
mod replay;
mod retry;
mod scripted;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::json::canonical_json;

pub use embed::{EmbeddingVector, Embedder, LexicalEmbedder, LEXICAL_DIM};
pub use http::{BackendConfig, HttpBackend, RemoteEmbedder};
pub use replay::{FixtureEntry, RecordingBackend, ReplayBackend};
pub use retry::RetryPolicy;
pub use scripted::ScriptedBackend;

#[derive(Debug, Clone, thiserror::Error)]
pub enum LlmError {
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("rate limited{}", .retry_after_ms.map(|ms| format!(" (retry after {ms} ms)")).unwrap_or_default())]
    RateLimited { retry_after_ms: Option<u64> },
    #[error("request timed out")]
    Timeout,
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("request rejected {status}: {body}")]
    BadRequest { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed backend response: {0}")]
    BadResponse(String),
    #[error("no replay fixture for request digest {digest}")]
    FixtureMiss { digest: String },
    #[error("fixture file error: {0}")]
    Fixture(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl LlmError {
    /// Transient failures worth another attempt. Authentication, request and
    /// fixture errors never are.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            LlmError::RateLimited { .. } | LlmError::Timeout | LlmError::Server { .. } | LlmError::Transport(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub n_samples: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams { temperature: 0.0, max_tokens: 2048, n_samples: 1, seed: None }
    }
}

impl SamplingParams {
    pub fn single(temperature: f64, max_tokens: u32) -> Self {
        SamplingParams { temperature, max_tokens, n_samples: 1, seed: None }
    }
}

/// A fully specified chat call. Its canonical JSON is the request body sent
/// to chat-completions servers and the input of the replay digest.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub params: SamplingParams,
}

impl ChatRequest {
    pub fn to_json(&self) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": self.messages,
            "temperature": self.params.temperature,
            "max_tokens": self.params.max_tokens,
            "n": self.params.n_samples,
        });
        if let Some(seed) = self.params.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    pub fn canonical_json(&self) -> String {
        canonical_json(&self.to_json())
    }

    /// Lowercase hex SHA-256 of the canonical request JSON (UTF-8).
    pub fn digest(&self) -> String {
        digest_hex(self.canonical_json().as_bytes())
    }

    /// The same request asking for a single sample; used for client-side
    /// fan-out.
    pub fn single_sample(&self, seed_offset: u64) -> ChatRequest {
        let mut params = self.params.clone();
        params.n_samples = 1;
        params.seed = params.seed.map(|s| s.wrapping_add(seed_offset));
        ChatRequest { model: self.model.clone(), messages: self.messages.clone(), params }
    }
}

pub(crate) fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub texts: Vec<String>,
    pub model_id: String,
    pub usage: Usage,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<LlmResponse, LlmError>;
}

/// Chat and embedding access with validation and retries.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    embedder: Arc<dyn Embedder>,
    model: String,
    retry: RetryPolicy,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("model", &self.model).field("retry", &self.retry).finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, embedder: Arc<dyn Embedder>, model: impl Into<String>) -> Self {
        Gateway { backend, embedder, model: model.into(), retry: RetryPolicy::default() }
    }

    /// Offline gateway over a replay fixture with the lexical embedder.
    pub fn replay(fixture: ReplayBackend, model: impl Into<String>) -> Self {
        Gateway::new(Arc::new(fixture), Arc::new(LexicalEmbedder::default()), model)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn request(&self, messages: Vec<ChatMessage>, params: SamplingParams) -> ChatRequest {
        ChatRequest { model: self.model.clone(), messages, params }
    }

    pub fn chat(&self, messages: Vec<ChatMessage>, params: SamplingParams) -> Result<LlmResponse, LlmError> {
        let request = self.request(messages, params);
        self.chat_request(&request)
    }

    pub fn chat_request(&self, request: &ChatRequest) -> Result<LlmResponse, LlmError> {
        if request.params.n_samples == 0 {
            return Err(LlmError::InvalidRequest("n_samples must be at least 1".into()));
        }
        if request.params.temperature.is_nan() || request.params.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        if let Some(empty) = request.messages.iter().position(|m| m.content.is_empty()) {
            return Err(LlmError::InvalidRequest(format!("message {empty} has empty content")));
        }
        let response = self.retry.run(|| self.backend.complete(request))?;
        if response.texts.len() != request.params.n_samples as usize {
            return Err(LlmError::BadResponse(format!(
                "expected {} completions, got {}",
                request.params.n_samples,
                response.texts.len()
            )));
        }
        Ok(response)
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        self.retry.run(|| self.embedder.embed(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    fn msgs() -> Vec<ChatMessage> {
        vec![ChatMessage::system("sys"), ChatMessage::user("hi")]
    }

    #[test]
    fn canonical_request_is_sorted_and_compact() {
        let req = ChatRequest { model: "m".into(), messages: msgs(), params: SamplingParams::single(0.0, 16) };
        assert_eq!(
            req.canonical_json(),
            r#"{"max_tokens":16,"messages":[{"content":"sys","role":"system"},{"content":"hi","role":"user"}],"model":"m","n":1,"temperature":0.0}"#
        );
        assert_eq!(req.digest().len(), 64);
        assert_eq!(req.digest(), req.clone().digest());
    }

    #[test]
    fn digest_covers_params() {
        let a = ChatRequest { model: "m".into(), messages: msgs(), params: SamplingParams::single(0.0, 16) };
        let mut b = a.clone();
        b.params.n_samples = 3;
        let mut c = a.clone();
        c.params.seed = Some(7);
        assert_ne!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    struct Flaky {
        calls: AtomicUsize,
        fail_first: usize,
        error: LlmError,
    }

    impl ChatBackend for Flaky {
        fn complete(&self, request: &ChatRequest) -> Result<LlmResponse, LlmError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(self.error.clone());
            }
            Ok(LlmResponse {
                texts: vec!["ok".into(); request.params.n_samples as usize],
                model_id: request.model.clone(),
                usage: Usage::default(),
            })
        }
    }

    fn gateway(backend: Arc<Flaky>, max_retries: u32) -> Gateway {
        Gateway::new(backend, Arc::new(LexicalEmbedder::default()), "m").with_retry(RetryPolicy {
            max_retries,
            initial_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        })
    }

    #[test]
    fn transient_errors_are_retried() {
        let backend = Arc::new(Flaky { calls: AtomicUsize::new(0), fail_first: 2, error: LlmError::RateLimited { retry_after_ms: None } });
        let gw = gateway(backend.clone(), 3);
        assert_eq!(gw.chat(msgs(), SamplingParams::default()).unwrap().texts, vec!["ok"]);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_are_bounded() {
        let backend = Arc::new(Flaky { calls: AtomicUsize::new(0), fail_first: 10, error: LlmError::Timeout });
        let gw = gateway(backend.clone(), 2);
        assert!(matches!(gw.chat(msgs(), SamplingParams::default()), Err(LlmError::Timeout)));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn auth_errors_are_not_retried() {
        let backend = Arc::new(Flaky { calls: AtomicUsize::new(0), fail_first: 10, error: LlmError::Auth("bad key".into()) });
        let gw = gateway(backend.clone(), 5);
        assert!(matches!(gw.chat(msgs(), SamplingParams::default()), Err(LlmError::Auth(_))));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn invalid_requests_rejected_before_backend() {
        let backend = Arc::new(Flaky { calls: AtomicUsize::new(0), fail_first: 0, error: LlmError::Timeout });
        let gw = gateway(backend.clone(), 0);
        let p = SamplingParams { n_samples: 0, ..SamplingParams::default() };
        assert!(matches!(gw.chat(msgs(), p), Err(LlmError::InvalidRequest(_))));
        assert!(matches!(
            gw.chat(vec![ChatMessage::user("")], SamplingParams::default()),
            Err(LlmError::InvalidRequest(_))
        ));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 0);
    }
}
