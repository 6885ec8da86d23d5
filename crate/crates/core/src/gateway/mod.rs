//! Uniform access to generative and embedding backends.
//!
//! Every request goes through a content-addressed [`ResponseCache`] before a
//! backend is touched, so ground-truth construction and evaluation runs can be
//! interrupted and resumed without repeating model calls.

mod cache;
mod http;
mod mock;
mod posterior;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::index::EmbeddingVector;

pub use cache::{CacheError, ResponseCache};
pub use http::{HttpBackend, HttpConfig, HttpEmbedder, WireFlavor};
pub use mock::{unit_hash, MockBackend, MockInstance, MockWorld, WorldProfile};
pub use posterior::{argmax_first, extract_posterior, ClassPosterior, Extraction, PosteriorSource, SURFACE_EPSILON};

pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend request timed out")]
    Timeout,
    #[error("malformed backend reply: {0}")]
    MalformedBackendReply(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{0} is not configured")]
    NotConfigured(&'static str),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model_id: String,
    pub prompt: String,
    pub max_new_tokens: u32,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub logprobs_requested: bool,
}

impl GenerationRequest {
    pub fn greedy(model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self { model_id: model_id.into(), prompt: prompt.into(), max_new_tokens: 4, temperature: 0.0, logprobs_requested: true }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_new_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest("temperature must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 over the model id, prompt and decode parameters.
    pub fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"gen\0");
        h.update(self.model_id.as_bytes());
        h.update([0]);
        h.update(self.prompt.as_bytes());
        h.update([0]);
        h.update(self.max_new_tokens.to_le_bytes());
        h.update(self.temperature.to_bits().to_le_bytes());
        h.update([self.logprobs_requested as u8]);
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

/// Generated text plus the candidate distribution for the first generated
/// token, when the backend reports one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    #[serde(default)]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub backend: BackendKind,
    #[serde(skip)]
    pub cached: bool,
}

pub trait Backend: Send + Sync {
    /// Stable identifier recorded in run manifests.
    fn id(&self) -> String;
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, GatewayError>;
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> String;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallStats {
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub embed_calls: u64,
    pub embed_cache_hits: u64,
}

#[derive(Default)]
struct Counters {
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
    embed_calls: AtomicU64,
    embed_cache_hits: AtomicU64,
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    embedder: Option<Arc<dyn Embedder>>,
    cache: ResponseCache,
    embed_cache: ResponseCache,
    pool: rayon::ThreadPool,
    parallelism: usize,
    counters: Counters,
}

pub struct GatewayBuilder {
    backend: Arc<dyn Backend>,
    embedder: Option<Arc<dyn Embedder>>,
    cache: Option<ResponseCache>,
    embed_cache: Option<ResponseCache>,
    parallelism: usize,
}

impl GatewayBuilder {
    pub fn embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    pub fn cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn embed_cache(mut self, cache: ResponseCache) -> Self {
        self.embed_cache = Some(cache);
        self
    }

    pub fn parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    pub fn build(self) -> Gateway {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.parallelism)
            .thread_name(|i| format!("aicl-gateway-{i}"))
            .build()
            .expect("thread pool");
        Gateway {
            backend: self.backend,
            embedder: self.embedder,
            cache: self.cache.unwrap_or_default(),
            embed_cache: self.embed_cache.unwrap_or_default(),
            pool,
            parallelism: self.parallelism,
            counters: Counters::default(),
        }
    }
}

impl Gateway {
    pub fn builder(backend: Arc<dyn Backend>) -> GatewayBuilder {
        GatewayBuilder { backend, embedder: None, cache: None, embed_cache: None, parallelism: DEFAULT_PARALLELISM }
    }

    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self::builder(backend).build()
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    /// Runs `f` inside the gateway's bounded worker pool; rayon parallel
    /// iterators used inside `f` share its threads.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    pub fn stats(&self) -> CallStats {
        CallStats {
            backend_calls: self.counters.backend_calls.load(Ordering::SeqCst),
            cache_hits: self.counters.cache_hits.load(Ordering::SeqCst),
            embed_calls: self.counters.embed_calls.load(Ordering::SeqCst),
            embed_cache_hits: self.counters.embed_cache_hits.load(Ordering::SeqCst),
        }
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        req.validate()?;
        let key = req.cache_key();
        if let Some(bytes) = self.cache.get(&key) {
            if let Ok(mut resp) = serde_json::from_slice::<GenerationResponse>(&bytes) {
                self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
                resp.cached = true;
                return Ok(resp);
            }
        }
        self.counters.backend_calls.fetch_add(1, Ordering::SeqCst);
        let mut resp = self.backend.generate(req)?;
        resp.cached = false;
        let bytes = serde_json::to_vec(&resp).expect("response serializes");
        self.cache.insert(&key, &bytes)?;
        Ok(resp)
    }

    /// Embeds `texts`, preserving order. Repeated texts are sent once.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let embedder = self.embedder.as_ref().ok_or(GatewayError::NotConfigured("embedding endpoint"))?;
        let keys: Vec<String> = texts.iter().map(|t| embed_key(&embedder.id(), t)).collect();
        let mut found: Vec<Option<Vec<f32>>> =
            keys.iter().map(|k| self.embed_cache.get(k).and_then(|b| serde_json::from_slice(&b).ok())).collect();
        let mut missing: Vec<usize> = Vec::new();
        for (i, f) in found.iter().enumerate() {
            if f.is_some() {
                self.counters.embed_cache_hits.fetch_add(1, Ordering::SeqCst);
            } else if !missing.iter().any(|&j| texts[j] == texts[i]) {
                missing.push(i);
            }
        }
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            self.counters.embed_calls.fetch_add(1, Ordering::SeqCst);
            let vectors = embedder.embed(&batch)?;
            if vectors.len() != batch.len() {
                return Err(GatewayError::MalformedBackendReply(format!("asked for {} embeddings, got {}", batch.len(), vectors.len())));
            }
            for (&i, v) in missing.iter().zip(vectors) {
                self.embed_cache.insert(&keys[i], &serde_json::to_vec(&v).expect("vector serializes"))?;
                found[i] = Some(v);
            }
            for i in 0..texts.len() {
                if found[i].is_none() {
                    let src = missing.iter().find(|&&j| texts[j] == texts[i]).copied().unwrap();
                    found[i] = found[src].clone();
                }
            }
        }
        let dim = found[0].as_ref().map_or(0, Vec::len);
        found
            .into_iter()
            .map(|v| {
                let v = v.expect("filled above");
                if v.len() != dim {
                    return Err(GatewayError::DimensionMismatch { expected: dim, got: v.len() });
                }
                EmbeddingVector::new(v).map_err(|e| GatewayError::MalformedBackendReply(e.to_string()))
            })
            .collect()
    }
}

fn embed_key(model: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(b"emb\0");
    h.update(model.as_bytes());
    h.update([0]);
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Echo(AtomicU64);

    impl Backend for Echo {
        fn id(&self) -> String {
            "echo".into()
        }
        fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(GenerationResponse {
                text: format!("echo:{}", req.prompt.len()),
                token_logprobs: None,
                backend: BackendKind::Mock,
                cached: false,
            })
        }
    }

    struct CountingEmbedder(Mutex<Vec<usize>>);

    impl Embedder for CountingEmbedder {
        fn id(&self) -> String {
            "count".into()
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
            self.0.lock().unwrap().push(texts.len());
            Ok(texts.iter().map(|t| vec![t.len() as f32, 1.0]).collect())
        }
    }

    #[test]
    fn identical_requests_hit_cache() {
        let backend = Arc::new(Echo(AtomicU64::new(0)));
        let gw = Gateway::new(backend.clone());
        let req = GenerationRequest::greedy("m", "hello");
        let a = gw.generate(&req).unwrap();
        let b = gw.generate(&req).unwrap();
        assert!(!a.cached && b.cached);
        assert_eq!(a.text, b.text);
        assert_eq!(backend.0.load(Ordering::SeqCst), 1);
        assert_eq!(gw.stats().backend_calls, 1);
        assert_eq!(gw.stats().cache_hits, 1);

        let mut other = req.clone();
        other.temperature = 0.7;
        assert!(!gw.generate(&other).unwrap().cached);
    }

    #[test]
    fn invalid_requests_rejected() {
        let gw = Gateway::new(Arc::new(Echo(AtomicU64::new(0))));
        let mut req = GenerationRequest::greedy("m", "");
        assert!(gw.generate(&req).is_err());
        req.prompt = "x".into();
        req.max_new_tokens = 0;
        assert!(gw.generate(&req).is_err());
        req.max_new_tokens = 1;
        req.temperature = -1.0;
        assert!(gw.generate(&req).is_err());
    }

    #[test]
    fn embed_dedups_and_caches() {
        let emb = Arc::new(CountingEmbedder(Mutex::new(Vec::new())));
        let gw = Gateway::builder(Arc::new(Echo(AtomicU64::new(0)))).embedder(emb.clone()).build();
        assert!(gw.embed(&[]).unwrap().is_empty());
        let texts: Vec<String> = ["ab", "abc", "ab"].iter().map(|s| s.to_string()).collect();
        let out = gw.embed(&texts).unwrap();
        assert_eq!(out[0], out[2]);
        assert_eq!(out[1].values(), &[3.0, 1.0]);
        assert_eq!(*emb.0.lock().unwrap(), vec![2]);
        gw.embed(&texts).unwrap();
        assert_eq!(emb.0.lock().unwrap().len(), 1);
    }

    #[test]
    fn embed_without_endpoint_is_an_error() {
        let gw = Gateway::new(Arc::new(Echo(AtomicU64::new(0))));
        assert!(matches!(gw.embed(&["x".to_string()]), Err(GatewayError::NotConfigured(_))));
    }
}
