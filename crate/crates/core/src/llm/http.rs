//! Chat-completions HTTP client (`POST /v1/chat/completions`,
//! `POST /v1/embeddings`). Works with hosted APIs and with local
//! open-model servers speaking the same protocol.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, EmbeddingVector, Embedder, LlmError, LlmResponse, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Defaults to `$KE_BASE_URL` when set.
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub chat_model: String,
    pub embed_model: String,
    /// Expected embedding dimensionality of `embed_model`.
    pub embed_dim: usize,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Cap on in-flight HTTP requests per backend.
    pub max_concurrency: usize,
    /// Whether the server honours `n > 1`; otherwise samples are requested
    /// one at a time.
    pub native_n: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            base_url: std::env::var("KE_BASE_URL")
                .ok()
                .filter(|u| !u.is_empty())
                .unwrap_or_else(|| "https://api.openai.com".into()),
            api_key_env: "KE_API_KEY".into(),
            chat_model: "gpt-4-turbo".into(),
            embed_model: "all-MiniLM-L6-v2".into(),
            embed_dim: 384,
            timeout_secs: 60,
            max_retries: 3,
            max_concurrency: 4,
            native_n: true,
        }
    }
}

impl BackendConfig {
    fn endpoint(&self, path: &str) -> String {
        let base = self.base_url.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base);
        format!("{base}/v1/{path}")
    }

    fn api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_env).ok().filter(|k| !k.is_empty())
    }

    fn client(&self) -> Result<Client, LlmError> {
        Client::builder()
            .timeout(Duration::from_secs(self.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))
    }
}

/// Counting semaphore bounding concurrent requests.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(permits: usize) -> Self {
        Limiter { free: Mutex::new(permits.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpBackend {
    client: Client,
    config: BackendConfig,
    api_key: Option<String>,
    limiter: Limiter,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, LlmError> {
        Ok(HttpBackend {
            client: config.client()?,
            api_key: config.api_key(),
            limiter: Limiter::new(config.max_concurrency),
            config,
        })
    }

    fn authorized(&self, builder: RequestBuilder) -> RequestBuilder {
        match &self.api_key {
            Some(key) => builder.bearer_auth(key),
            None => builder,
        }
    }

    fn send(&self, request: &ChatRequest) -> Result<LlmResponse, LlmError> {
        let _permit = self.limiter.acquire();
        let body = request.to_json();
        let resp = self
            .authorized(self.client.post(self.config.endpoint("chat/completions")))
            .json(&body)
            .send()
            .map_err(map_transport)?;
        let value = check_status(resp)?;
        parse_chat_response(&value, &request.model)
    }

    fn fan_out(&self, request: &ChatRequest, count: usize, offset: u64) -> Result<Vec<LlmResponse>, LlmError> {
        thread::scope(|s| {
            let handles: Vec<_> = (0..count)
                .map(|i| {
                    let single = request.single_sample(offset + i as u64);
                    s.spawn(move || self.send(&single))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(LlmError::Transport("request thread panicked".into()))))
                .collect()
        })
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<LlmResponse, LlmError> {
        let n = request.params.n_samples as usize;
        let mut merged = if self.config.native_n || n == 1 {
            self.send(request)?
        } else {
            LlmResponse { texts: Vec::new(), model_id: request.model.clone(), usage: Usage::default() }
        };
        merged.texts.truncate(n);
        let missing = n - merged.texts.len();
        if missing > 0 {
            for extra in self.fan_out(request, missing, merged.texts.len() as u64)? {
                merged.texts.extend(extra.texts);
                merged.usage.prompt_tokens += extra.usage.prompt_tokens;
                merged.usage.completion_tokens += extra.usage.completion_tokens;
            }
        }
        Ok(merged)
    }
}

fn map_transport(e: reqwest::Error) -> LlmError {
    if e.is_timeout() {
        LlmError::Timeout
    } else {
        LlmError::Transport(e.to_string())
    }
}

fn check_status(resp: reqwest::blocking::Response) -> Result<Value, LlmError> {
    let status = resp.status();
    let retry_after_ms = resp
        .headers()
        .get(reqwest::header::RETRY_AFTER)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<f64>().ok())
        .map(|secs| (secs * 1000.0) as u64);
    let text = resp.text().map_err(map_transport)?;
    match status {
        s if s.is_success() => {
            serde_json::from_str(&text).map_err(|e| LlmError::BadResponse(format!("invalid JSON body: {e}")))
        }
        StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => Err(LlmError::Auth(text)),
        StatusCode::TOO_MANY_REQUESTS => Err(LlmError::RateLimited { retry_after_ms }),
        StatusCode::REQUEST_TIMEOUT | StatusCode::GATEWAY_TIMEOUT => Err(LlmError::Timeout),
        s if s.is_server_error() => Err(LlmError::Server { status: s.as_u16(), body: text }),
        s => Err(LlmError::BadRequest { status: s.as_u16(), body: text }),
    }
}

/// Extracts `choices[*].message.content` (in `index` order) and usage.
pub(crate) fn parse_chat_response(value: &Value, requested_model: &str) -> Result<LlmResponse, LlmError> {
    let choices = value["choices"].as_array().ok_or_else(|| LlmError::BadResponse("missing choices".into()))?;
    let mut indexed: Vec<(u64, String)> = Vec::with_capacity(choices.len());
    for (pos, choice) in choices.iter().enumerate() {
        let content = choice["message"]["content"]
            .as_str()
            .ok_or_else(|| LlmError::BadResponse("choice without message content".into()))?;
        indexed.push((choice["index"].as_u64().unwrap_or(pos as u64), content.to_string()));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(LlmResponse {
        texts: indexed.into_iter().map(|(_, t)| t).collect(),
        model_id: value["model"].as_str().unwrap_or(requested_model).to_string(),
        usage: Usage {
            prompt_tokens: value["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: value["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        },
    })
}

/// Embeddings from a remote `/v1/embeddings` endpoint, L2-normalized.
pub struct RemoteEmbedder {
    client: Client,
    config: BackendConfig,
    api_key: Option<String>,
}

impl RemoteEmbedder {
    pub fn new(config: BackendConfig) -> Result<Self, LlmError> {
        Ok(RemoteEmbedder { client: config.client()?, api_key: config.api_key(), config })
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.config.embed_dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        if text.trim().is_empty() {
            return Ok(EmbeddingVector::zeros(self.config.embed_dim));
        }
        let mut builder = self.client.post(self.config.endpoint("embeddings"));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .json(&json!({"model": self.config.embed_model, "input": text}))
            .send()
            .map_err(map_transport)?;
        let value = check_status(resp)?;
        let values: Vec<f64> = value["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| LlmError::BadResponse("missing data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| LlmError::BadResponse("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        if values.len() != self.config.embed_dim {
            return Err(LlmError::BadResponse(format!(
                "embedding has {} dims, configured {}",
                values.len(),
                self.config.embed_dim
            )));
        }
        Ok(EmbeddingVector::normalized(values))
    }
}
