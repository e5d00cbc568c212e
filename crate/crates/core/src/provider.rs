//! Client side of the embedding-provider wire protocol.
//!
//! ```text
//! POST /v1/embed/image  {"images_b64": [...]}                 -> {"dim": D, "vectors": [[...], ...]}
//! POST /v1/embed/text   {"texts": [...]}                      -> {"dim": D, "vectors": [[...], ...]}
//! POST /v1/variants     {"class_name": "...", "n_variants": 4} -> {"descriptions": ["...", ...]}
//! GET  /v1/health                                             -> {"status": "ok", "encoder_id": "...", "dim": D}
//! ```
//!
//! Large inputs are split into batches of at most `max_in_flight` items and
//! up to `max_in_flight` batches are in flight at once. Each batch carries an
//! `x-request-id` header equal to its batch index and results are placed by
//! that index, never by completion order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{MpaError, Result};
use crate::model::EmbeddingVector;

pub const PROVIDER_URL_ENV: &str = "MPA_PROVIDER_URL";
pub const DEFAULT_PROVIDER_URL: &str = "http://127.0.0.1:8765";
pub const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub base_url: String,
    /// Per-request timeout in seconds.
    pub timeout_secs: f64,
    pub max_in_flight: usize,
    pub retry_count: u32,
    /// First backoff delay; doubles on every retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    /// Identity of the LLM behind `/v1/variants`; keys the variant cache.
    #[serde(default = "default_llm_id")]
    pub llm_id: String,
}

fn default_llm_id() -> String {
    "default".to_string()
}

fn default_backoff_ms() -> u64 {
    250
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_PROVIDER_URL.to_string(),
            timeout_secs: 30.0,
            max_in_flight: 4,
            retry_count: 3,
            backoff_base_ms: default_backoff_ms(),
            llm_id: default_llm_id(),
        }
    }
}

impl ProviderConfig {
    /// Defaults with `base_url` taken from `MPA_PROVIDER_URL` when set.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Ok(url) = std::env::var(PROVIDER_URL_ENV) {
            if !url.trim().is_empty() {
                cfg.base_url = url.trim().to_string();
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(MpaError::InvalidConfig("provider timeout must be > 0".into()));
        }
        if self.max_in_flight == 0 {
            return Err(MpaError::InvalidConfig("max_in_flight must be positive".into()));
        }
        if self.base_url.is_empty() {
            return Err(MpaError::InvalidConfig("provider base_url is empty".into()));
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (0-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << attempt.min(20)))
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct VariantsResponse {
    descriptions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub encoder_id: String,
    pub dim: usize,
}

/// Declared dim and vectors for one request batch.
type BatchResult = Result<(usize, Vec<EmbeddingVector>)>;

fn violation(msg: impl Into<String>) -> MpaError {
    MpaError::ProviderContractViolation(msg.into())
}

/// Validates an embed response body against the number of inputs sent.
/// Returns the declared dim and the vectors in request order.
pub fn parse_embed_response(body: &[u8], expected: usize) -> Result<(usize, Vec<EmbeddingVector>)> {
    let resp: EmbedResponse =
        serde_json::from_slice(body).map_err(|e| violation(format!("malformed embed response: {e}")))?;
    if resp.dim == 0 {
        return Err(violation("declared dim is 0"));
    }
    if resp.vectors.len() != expected {
        return Err(violation(format!(
            "expected {expected} vectors, provider returned {}",
            resp.vectors.len()
        )));
    }
    let dim = resp.dim;
    let vectors = resp
        .vectors
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            if v.len() != dim {
                return Err(violation(format!(
                    "vector {i} has dim {} but provider declared {dim}",
                    v.len()
                )));
            }
            EmbeddingVector::new(v).map_err(|e| violation(format!("vector {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dim, vectors))
}

pub fn parse_variants_response(body: &[u8], n_variants: usize) -> Result<Vec<String>> {
    let resp: VariantsResponse = serde_json::from_slice(body)
        .map_err(|e| violation(format!("malformed variants response: {e}")))?;
    let expected = n_variants + 1;
    if resp.descriptions.len() != expected {
        return Err(violation(format!(
            "expected {expected} descriptions, provider returned {}",
            resp.descriptions.len()
        )));
    }
    if let Some(i) = resp.descriptions.iter().position(|d| d.trim().is_empty()) {
        return Err(violation(format!("description {i} is empty")));
    }
    Ok(resp.descriptions)
}

pub fn parse_health_response(body: &[u8]) -> Result<Health> {
    let h: Health =
        serde_json::from_slice(body).map_err(|e| violation(format!("malformed health response: {e}")))?;
    if h.status != "ok" {
        return Err(MpaError::ProviderUnavailable(format!("provider status {:?}", h.status)));
    }
    if h.dim == 0 {
        return Err(violation("health reports dim 0"));
    }
    Ok(h)
}

pub fn is_png(bytes: &[u8]) -> bool {
    bytes.len() > PNG_SIGNATURE.len() && bytes[..PNG_SIGNATURE.len()] == PNG_SIGNATURE
}

enum Attempt {
    Retryable(String),
    Fatal(MpaError),
}

/// Blocking HTTP client for a running provider service.
pub struct HttpProvider {
    cfg: ProviderConfig,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(cfg: ProviderConfig) -> Result<Self> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| MpaError::ProviderUnavailable(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { cfg, client })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    pub fn health(&self) -> Result<Health> {
        let body = self.send(None, "/v1/health", 0)?;
        parse_health_response(&body)
    }

    /// Embeds PNG byte streams, one vector per image, in request order.
    pub fn embed_images(&self, images: &[Vec<u8>]) -> Result<Vec<EmbeddingVector>> {
        if images.is_empty() {
            return Err(MpaError::EmptyInput("image list"));
        }
        if let Some(i) = images.iter().position(|b| !is_png(b)) {
            return Err(MpaError::Format(format!("image {i} is not a PNG byte stream")));
        }
        self.embed_batched(images, "/v1/embed/image", |batch| {
            json!({ "images_b64": batch.iter().map(|b| BASE64.encode(b)).collect::<Vec<_>>() })
        })
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(MpaError::EmptyInput("text list"));
        }
        self.embed_batched(texts, "/v1/embed/text", |batch| json!({ "texts": batch }))
    }

    /// Returns the original description followed by `n_variants` paraphrases.
    pub fn generate_variants(&self, class_name: &str, n_variants: usize) -> Result<Vec<String>> {
        let name = class_name.trim();
        if name.is_empty() {
            return Err(MpaError::EmptyClassName);
        }
        if n_variants == 0 {
            return Err(MpaError::InvalidConfig("n_variants must be at least 1".into()));
        }
        let body = json!({ "class_name": name, "n_variants": n_variants });
        let resp = self.send(Some(&body), "/v1/variants", 0)?;
        parse_variants_response(&resp, n_variants)
    }

    fn embed_batched<T, F>(&self, items: &[T], path: &str, make_body: F) -> Result<Vec<EmbeddingVector>>
    where
        T: Sync,
        F: Fn(&[T]) -> serde_json::Value + Sync,
    {
        let batches: Vec<&[T]> = items.chunks(self.cfg.max_in_flight).collect();
        let results: Mutex<Vec<Option<BatchResult>>> =
            Mutex::new((0..batches.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = self.cfg.max_in_flight.min(batches.len());
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let id = next.fetch_add(1, Ordering::Relaxed);
                    let Some(batch) = batches.get(id) else { break };
                    let body = make_body(batch);
                    let outcome = self
                        .send(Some(&body), path, id)
                        .and_then(|resp| parse_embed_response(&resp, batch.len()));
                    results.lock().expect("result slots poisoned")[id] = Some(outcome);
                });
            }
        });

        let mut dim = None;
        let mut out = Vec::with_capacity(items.len());
        for (id, slot) in results.into_inner().expect("result slots poisoned").into_iter().enumerate() {
            let (batch_dim, vectors) = slot.expect("every batch is processed")?;
            match dim {
                None => dim = Some(batch_dim),
                Some(d) if d != batch_dim => {
                    return Err(violation(format!(
                        "batch {id} declared dim {batch_dim}, earlier batches declared {d}"
                    )))
                }
                Some(_) => {}
            }
            out.extend(vectors);
        }
        Ok(out)
    }

    /// POSTs `body` (or GETs when `None`), retrying transient failures with
    /// exponential backoff.
    fn send(&self, body: Option<&serde_json::Value>, path: &str, request_id: usize) -> Result<Vec<u8>> {
        let url = self.cfg.url(path);
        let mut last = String::new();
        for attempt in 0..=self.cfg.retry_count {
            if attempt > 0 {
                let delay = self.cfg.backoff(attempt - 1);
                debug!("retrying {url} (request {request_id}) in {delay:?}");
                thread::sleep(delay);
            }
            match self.try_once(body, &url, request_id) {
                Ok(bytes) => return Ok(bytes),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(msg)) => {
                    warn!("{url} attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(MpaError::ProviderUnavailable(format!(
            "{url}: {last} (after {} attempts)",
            self.cfg.retry_count + 1
        )))
    }

    fn try_once(&self, body: Option<&serde_json::Value>, url: &str, request_id: usize) -> Result<Vec<u8>, Attempt> {
        let req = match body {
            Some(b) => self.client.post(url).json(b),
            None => self.client.get(url),
        };
        let resp = req
            .header("x-request-id", request_id.to_string())
            .send()
            .map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = resp.status();
        if let Some(echo) = resp.headers().get("x-request-id") {
            if echo.to_str().ok() != Some(request_id.to_string().as_str()) {
                return Err(Attempt::Fatal(violation(format!(
                    "response request id {echo:?} does not match {request_id}"
                ))));
            }
        }
        let bytes = resp
            .bytes()
            .map_err(|e| Attempt::Retryable(format!("reading body: {e}")))?;
        if status.is_success() {
            Ok(bytes.to_vec())
        } else if status.is_server_error() || status.as_u16() == 429 {
            Err(Attempt::Retryable(format!("HTTP {status}")))
        } else {
            Err(Attempt::Fatal(violation(format!(
                "HTTP {status}: {}",
                String::from_utf8_lossy(&bytes).chars().take(200).collect::<String>()
            ))))
        }
    }
}
