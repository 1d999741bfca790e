//! Embedding-provider contract plus a deterministic offline embedder and a
//! remote-API client.
//!
//! Everything downstream (indexes, attacks, detectors) talks to the
//! [`Embedder`] trait, so swapping the signed-hash synthetic provider for a
//! remote model is a configuration change, not a code change. The synthetic
//! provider matters for the attack experiments: it gives the coordinate
//! search a real, deterministic objective landscape with no model dependency.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding batch must be non-empty")]
    EmptyBatch,
    #[error("vector has zero norm or non-finite components")]
    InvalidVector,
    #[error("auth token environment variable {env:?} is not set")]
    MissingAuth { env: String },
    #[error("remote embedding request failed for batch starting at item {batch_start}: {reason}")]
    RemoteFailure { batch_start: usize, reason: String },
    #[error("remote response malformed: {0}")]
    InvalidResponse(String),
}

/// A unit-normalized embedding. `zero_content` marks the fallback vector
/// substituted for empty or degenerate inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    #[serde(default)]
    zero_content: bool,
}

impl EmbeddingVector {
    /// Normalize `values` to unit length. Errors if the norm is zero or any
    /// component is non-finite.
    pub fn unit(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::InvalidVector);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::InvalidVector);
        }
        for v in values.iter_mut() {
            *v /= norm;
        }
        Ok(EmbeddingVector {
            values,
            zero_content: false,
        })
    }

    /// Normalize, substituting the flagged first basis vector when the input
    /// has no content (zero norm).
    pub fn unit_or_fallback(values: Vec<f64>) -> Self {
        let dim = values.len();
        match EmbeddingVector::unit(values) {
            Ok(v) => v,
            Err(_) => EmbeddingVector::fallback(dim),
        }
    }

    /// The fixed unit basis vector e1, flagged as zero-content.
    pub fn fallback(dimension: usize) -> Self {
        let mut values = vec![0.0; dimension.max(1)];
        values[0] = 1.0;
        EmbeddingVector {
            values,
            zero_content: true,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero_content(&self) -> bool {
        self.zero_content
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity of two unit vectors (their dot product).
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dimension() != b.dimension() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.dimension(),
            got: b.dimension(),
        });
    }
    Ok(dot(a.values(), b.values()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Provider contract. Implementations must be shareable across threads;
/// batch calls preserve input order.
pub trait Embedder: Send + Sync {
    /// Stable identity string, recorded in indexes and cache keys.
    fn identity(&self) -> String;

    fn dimension(&self) -> usize;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

/// Declarative embedder configuration, loadable from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Synthetic {
        dimension: usize,
        seed: u64,
    },
    Remote {
        dimension: usize,
        endpoint: String,
        model: String,
        /// Name of the environment variable holding the bearer token.
        #[serde(default = "default_auth_env")]
        auth_env: String,
        #[serde(default = "default_batch_size")]
        batch_size: usize,
        #[serde(default = "default_max_retries")]
        max_retries: usize,
    },
}

fn default_auth_env() -> String {
    "EMBEDDING_API_KEY".to_string()
}

fn default_batch_size() -> usize {
    64
}

fn default_max_retries() -> usize {
    3
}

impl EmbedderSpec {
    pub fn synthetic(dimension: usize, seed: u64) -> Self {
        EmbedderSpec::Synthetic { dimension, seed }
    }

    pub fn dimension(&self) -> usize {
        match self {
            EmbedderSpec::Synthetic { dimension, .. } => *dimension,
            EmbedderSpec::Remote { dimension, .. } => *dimension,
        }
    }

    /// Build the provider this spec describes, wrapped in the shared
    /// content-addressed cache.
    pub fn build(&self) -> CachingEmbedder {
        let inner: Box<dyn Embedder> = match self {
            EmbedderSpec::Synthetic { dimension, seed } => {
                Box::new(SyntheticEmbedder::new(*dimension, *seed))
            }
            EmbedderSpec::Remote {
                dimension,
                endpoint,
                model,
                auth_env,
                batch_size,
                max_retries,
            } => Box::new(RemoteEmbedder {
                dimension: *dimension,
                endpoint: endpoint.clone(),
                model: model.clone(),
                auth_env: auth_env.clone(),
                batch_size: (*batch_size).max(1),
                max_retries: *max_retries,
                base_backoff: Duration::from_millis(200),
            }),
        };
        CachingEmbedder::new(inner)
    }
}

/// Deterministic signed-hash n-gram embedder.
///
/// Character n-grams (n = 3..=5) of the lowercased text are hashed with the
/// seed into `dimension` buckets with a sign bit, then unit-normalized.
/// Identical text always yields identical vectors, and texts sharing more
/// n-grams land closer in cosine.
#[derive(Debug, Clone)]
pub struct SyntheticEmbedder {
    dimension: usize,
    seed: u64,
}

impl SyntheticEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        SyntheticEmbedder { dimension, seed }
    }

    fn accumulate(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.dimension];
        let lowered = text.to_lowercase();
        let chars: Vec<char> = lowered.chars().collect();
        let mut buf = String::new();
        for n in 3..=5usize {
            if chars.len() < n {
                continue;
            }
            for window in chars.windows(n) {
                buf.clear();
                buf.extend(window.iter());
                let h = seeded_fnv1a(self.seed, buf.as_bytes());
                let bucket = (h % self.dimension as u64) as usize;
                let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
                acc[bucket] += sign;
            }
        }
        acc
    }
}

/// FNV-1a with the seed folded into the offset basis. Stable across
/// platforms, unlike the std hasher.
fn seeded_fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl Embedder for SyntheticEmbedder {
    fn identity(&self) -> String {
        format!("synthetic:d{}:s{}", self.dimension, self.seed)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        Ok(texts
            .iter()
            .map(|t| EmbeddingVector::unit_or_fallback(self.accumulate(t)))
            .collect())
    }
}

/// Convenience wrapper used throughout tests and fixtures.
pub fn synthetic_embed(text: &str, dimension: usize, seed: u64) -> EmbeddingVector {
    SyntheticEmbedder::new(dimension, seed)
        .embed(text)
        .expect("synthetic embedding is infallible for single texts")
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct RemoteResponse {
    data: Vec<RemoteItem>,
}

#[derive(Deserialize)]
struct RemoteItem {
    index: usize,
    embedding: Vec<f64>,
}

/// HTTP JSON embedding client: request `{model, input: [..]}`, response
/// `{data: [{index, embedding}]}`. Transient failures are retried with
/// exponential backoff; returned vectors are re-normalized.
pub struct RemoteEmbedder {
    dimension: usize,
    endpoint: String,
    model: String,
    auth_env: String,
    batch_size: usize,
    max_retries: usize,
    base_backoff: Duration,
}

impl RemoteEmbedder {
    fn token(&self) -> Result<String, EmbedError> {
        std::env::var(&self.auth_env).map_err(|_| EmbedError::MissingAuth {
            env: self.auth_env.clone(),
        })
    }

    fn post_batch(&self, batch_start: usize, batch: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let token = self.token()?;
        let client = reqwest::blocking::Client::new();
        let mut attempt = 0usize;
        loop {
            let result = client
                .post(&self.endpoint)
                .bearer_auth(&token)
                .json(&RemoteRequest {
                    model: &self.model,
                    input: batch,
                })
                .timeout(Duration::from_secs(60))
                .send();
            let retryable = match result {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: RemoteResponse = resp
                        .json()
                        .map_err(|e| EmbedError::InvalidResponse(e.to_string()))?;
                    return assemble_remote_vectors(parsed, batch.len(), self.dimension);
                }
                Ok(resp) if resp.status().is_server_error() => {
                    format!("server status {}", resp.status())
                }
                Ok(resp) => {
                    // Client errors are permanent: no retry budget spent.
                    return Err(EmbedError::RemoteFailure {
                        batch_start,
                        reason: format!("status {}", resp.status()),
                    });
                }
                Err(e) => e.to_string(),
            };
            if attempt >= self.max_retries {
                return Err(EmbedError::RemoteFailure {
                    batch_start,
                    reason: format!("retries exhausted: {retryable}"),
                });
            }
            std::thread::sleep(self.base_backoff * 2u32.saturating_pow(attempt as u32));
            attempt += 1;
        }
    }
}

fn assemble_remote_vectors(
    response: RemoteResponse,
    expected: usize,
    dimension: usize,
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    if response.data.len() != expected {
        return Err(EmbedError::InvalidResponse(format!(
            "expected {expected} items, got {}",
            response.data.len()
        )));
    }
    let mut slots: Vec<Option<EmbeddingVector>> = vec![None; expected];
    for item in response.data {
        if item.index >= expected {
            return Err(EmbedError::InvalidResponse(format!(
                "index {} out of range",
                item.index
            )));
        }
        if item.embedding.len() != dimension {
            return Err(EmbedError::DimensionMismatch {
                expected: dimension,
                got: item.embedding.len(),
            });
        }
        slots[item.index] = Some(EmbeddingVector::unit_or_fallback(item.embedding));
    }
    slots
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| EmbedError::InvalidResponse("missing item index".to_string()))
}

impl Embedder for RemoteEmbedder {
    fn identity(&self) -> String {
        format!("remote:{}:d{}", self.model, self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        let mut out = Vec::with_capacity(texts.len());
        for (i, chunk) in texts.chunks(self.batch_size).enumerate() {
            out.extend(self.post_batch(i * self.batch_size, chunk)?);
        }
        Ok(out)
    }
}

/// Content-addressed cache keyed by (provider identity, sha256 of text).
/// The attack loop re-embeds thousands of near-duplicate candidates, so
/// repeated texts must be free.
pub struct CachingEmbedder {
    inner: Box<dyn Embedder>,
    identity: String,
    cache: Mutex<HashMap<[u8; 32], EmbeddingVector>>,
}

impl CachingEmbedder {
    pub fn new(inner: Box<dyn Embedder>) -> Self {
        let identity = inner.identity();
        CachingEmbedder {
            inner,
            identity,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn key(&self, text: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.identity.as_bytes());
        hasher.update([0u8]);
        hasher.update(text.as_bytes());
        hasher.finalize().into()
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

impl Embedder for CachingEmbedder {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        let keys: Vec<[u8; 32]> = texts.iter().map(|t| self.key(t)).collect();
        let mut out: Vec<Option<EmbeddingVector>> = {
            let cache = self.cache.lock().unwrap();
            keys.iter().map(|k| cache.get(k).cloned()).collect()
        };
        let mut miss_idx = Vec::new();
        let mut miss_texts = Vec::new();
        let mut first_seen: HashMap<[u8; 32], usize> = HashMap::new();
        for (i, slot) in out.iter().enumerate() {
            if slot.is_none() && !first_seen.contains_key(&keys[i]) {
                first_seen.insert(keys[i], miss_idx.len());
                miss_idx.push(i);
                miss_texts.push(texts[i]);
            }
        }
        if !miss_texts.is_empty() {
            let fresh = self.inner.embed_batch(&miss_texts)?;
            let mut cache = self.cache.lock().unwrap();
            for (slot, vec) in miss_idx.iter().zip(&fresh) {
                cache.insert(keys[*slot], vec.clone());
            }
            for (i, slot) in out.iter_mut().enumerate() {
                if slot.is_none() {
                    let pos = first_seen[&keys[i]];
                    *slot = Some(fresh[pos].clone());
                }
            }
        }
        Ok(out.into_iter().map(|s| s.expect("all slots filled")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_of_a_vector_with_itself_is_one() {
        let v = synthetic_embed("authentication bypass", 64, 1);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_orthogonal_basis_vectors_is_zero() {
        let a = EmbeddingVector::unit(vec![1.0, 0.0, 0.0]).unwrap();
        let b = EmbeddingVector::unit(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_matches_naive_loop_oracle() {
        let a = synthetic_embed("first random text about gardens", 128, 3);
        let b = synthetic_embed("second random text about engines", 128, 3);
        let mut naive = 0.0;
        for i in 0..128 {
            naive += a.values()[i] * b.values()[i];
        }
        assert!((cosine(&a, &b).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn cosine_dimension_mismatch_errors() {
        let a = EmbeddingVector::unit(vec![1.0, 0.0]).unwrap();
        let b = EmbeddingVector::unit(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            cosine(&a, &b),
            Err(EmbedError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn synthetic_embed_is_deterministic() {
        let a = synthetic_embed("same text twice", 256, 1);
        let b = synthetic_embed("same text twice", 256, 1);
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_embed_orders_related_above_unrelated() {
        let base = synthetic_embed("password reset procedure", 256, 1);
        let related = synthetic_embed("password reset policy", 256, 1);
        let unrelated = synthetic_embed("medieval pottery techniques", 256, 1);
        let cos_related = cosine(&base, &related).unwrap();
        let cos_unrelated = cosine(&base, &unrelated).unwrap();
        assert!(
            cos_related > cos_unrelated,
            "related {cos_related} vs unrelated {cos_unrelated}"
        );
    }

    #[test]
    fn synthetic_embed_empty_text_is_flagged_basis_vector() {
        let v = synthetic_embed("", 32, 1);
        assert!(v.is_zero_content());
        assert_eq!(v.values()[0], 1.0);
        assert!(v.values()[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn embed_batch_repeated_text_identical_output() {
        let embedder = EmbedderSpec::synthetic(64, 1).build();
        let out = embedder
            .embed_batch(&["first text", "second text", "first text"])
            .unwrap();
        assert_eq!(out[0], out[2]);
        assert_ne!(out[0], out[1]);
    }

    #[test]
    fn synthetic_batch_equals_single_calls() {
        let embedder = SyntheticEmbedder::new(64, 9);
        let texts = ["alpha beta", "gamma delta", "epsilon zeta"];
        let batch = embedder.embed_batch(&texts).unwrap();
        for (i, t) in texts.iter().enumerate() {
            assert_eq!(batch[i], embedder.embed(t).unwrap());
        }
    }

    #[test]
    fn caching_embedder_reuses_entries() {
        let embedder = EmbedderSpec::synthetic(32, 1).build();
        embedder.embed_batch(&["a", "b", "a"]).unwrap();
        assert_eq!(embedder.cache_len(), 2);
        embedder.embed_batch(&["a", "c"]).unwrap();
        assert_eq!(embedder.cache_len(), 3);
    }

    #[test]
    fn remote_embedder_normalizes_mock_vectors() {
        // Minimal one-shot HTTP server; returns fixed non-normalized vectors.
        use std::io::{Read, Write};
        use std::net::TcpListener;

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = [0u8; 4096];
            let mut read = 0;
            loop {
                let n = stream.read(&mut buf[read..]).unwrap();
                read += n;
                let text = String::from_utf8_lossy(&buf[..read]);
                if let Some(body_at) = text.find("\r\n\r\n") {
                    let content_length = text
                        .lines()
                        .find_map(|l| l.to_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                        .unwrap_or(0);
                    if read >= body_at + 4 + content_length {
                        break;
                    }
                }
            }
            let body = r#"{"data":[{"index":1,"embedding":[0.0,2.0,0.0]},{"index":0,"embedding":[3.0,0.0,4.0]}]}"#;
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
                body.len(),
                body
            );
            stream.write_all(response.as_bytes()).unwrap();
        });

        std::env::set_var("RAGSEC_TEST_EMBED_KEY", "test-token");
        let spec = EmbedderSpec::Remote {
            dimension: 3,
            endpoint: format!("http://{addr}/embed"),
            model: "mock-model".to_string(),
            auth_env: "RAGSEC_TEST_EMBED_KEY".to_string(),
            batch_size: 16,
            max_retries: 0,
        };
        let embedder = spec.build();
        let out = embedder.embed_batch(&["first", "second"]).unwrap();
        handle.join().unwrap();

        // index 0 -> [3,0,4] normalized to [0.6, 0, 0.8]; index 1 -> e2.
        assert!((out[0].values()[0] - 0.6).abs() < 1e-12);
        assert!((out[0].values()[2] - 0.8).abs() < 1e-12);
        assert!((out[1].values()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn remote_embedder_missing_auth_errors() {
        std::env::remove_var("RAGSEC_TEST_NO_KEY");
        let spec = EmbedderSpec::Remote {
            dimension: 3,
            endpoint: "http://127.0.0.1:1/none".to_string(),
            model: "m".to_string(),
            auth_env: "RAGSEC_TEST_NO_KEY".to_string(),
            batch_size: 8,
            max_retries: 0,
        };
        let err = spec.build().embed_batch(&["x"]).unwrap_err();
        assert!(matches!(err, EmbedError::MissingAuth { .. }));
    }

    #[test]
    fn statistical_separation_of_overlap_vs_disjoint_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(42);
        let left: Vec<String> = (0..60).map(|i| format!("leftword{i}")).collect();
        let right: Vec<String> = (0..60).map(|i| format!("rightterm{i}")).collect();
        let embedder = SyntheticEmbedder::new(256, 1);

        let sample = |rng: &mut rand_chacha::ChaCha20Rng, pool: &[String], n: usize| -> Vec<String> {
            (0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
        };

        let mut overlap_sum = 0.0;
        let mut disjoint_sum = 0.0;
        for _ in 0..100 {
            // Overlap pair: both texts drawn from the left pool.
            let a = sample(&mut rng, &left, 8).join(" ");
            let b = sample(&mut rng, &left, 8).join(" ");
            overlap_sum += cosine(&embedder.embed(&a).unwrap(), &embedder.embed(&b).unwrap()).unwrap();
            // Disjoint pair: one text per pool.
            let c = sample(&mut rng, &left, 8).join(" ");
            let d = sample(&mut rng, &right, 8).join(" ");
            disjoint_sum += cosine(&embedder.embed(&c).unwrap(), &embedder.embed(&d).unwrap()).unwrap();
        }
        assert!(
            overlap_sum / 100.0 > disjoint_sum / 100.0,
            "overlap mean {} should exceed disjoint mean {}",
            overlap_sum / 100.0,
            disjoint_sum / 100.0
        );
    }

    proptest! {
        #[test]
        fn every_synthetic_vector_is_unit_norm(text in ".{0,120}", seed in 0u64..20, dim in 1usize..300) {
            let v = synthetic_embed(&text, dim, seed);
            prop_assert!((v.norm() - 1.0).abs() < 1e-6);
            prop_assert!(v.values().iter().all(|x| x.is_finite()));
        }

        #[test]
        fn synthetic_embed_is_pure_in_text_dim_seed(text in "[a-z ]{0,60}", seed in 0u64..8, dim in 1usize..64) {
            let a = synthetic_embed(&text, dim, seed);
            let b = synthetic_embed(&text, dim, seed);
            prop_assert_eq!(a, b);
        }
    }
}
