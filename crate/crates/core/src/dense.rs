//! Embedding vectors, embedders, and an exact (brute-force) cosine index.

use std::hash::Hasher;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{JsonClient, RetryPolicy, TransportError};
use crate::sparse::tokenize;

pub const DENSE_INDEX_VERSION: u32 = 1;
pub const EMBEDDINGS_API_KEY_ENV: &str = "EMBEDDINGS_API_KEY";

#[derive(Debug, Error)]
pub enum DenseError {
    #[error("embedding transport error: {0}")]
    Transport(#[from] TransportError),
    #[error("embedding contract violation: {0}")]
    Contract(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,
    #[error("duplicate chunk id {0:?} in dense index")]
    DuplicateChunk(String),
    #[error("unsupported dense index version {0}")]
    Version(u32),
    #[error("dense index {path}: {message}")]
    Persist { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DenseError> {
        if values.is_empty() {
            return Err(DenseError::Contract("embedding has zero dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DenseError::Contract("embedding contains a non-finite value".into()));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine_raw(a: &[f64], b: &[f64]) -> Result<f64, DenseError> {
    if a.len() != b.len() {
        return Err(DenseError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(DenseError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, DenseError> {
    cosine_raw(&a.0, &b.0)
}

/// Maps cosine similarity in [-1, 1] onto [0, 1].
pub fn dense_score_from_cosine(cos: f64) -> f64 {
    (1.0 + cos) / 2.0
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, DenseError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, DenseError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }

    /// Short description stored alongside an index so a mismatched embedder can be detected.
    fn fingerprint(&self) -> String;
}

/// Hashed bag-of-tokens embedder. Each token from [`tokenize`] increments the
/// bucket `fnv1a64(token) % dim`; the count vector is L2-normalized. Text with
/// no tokens embeds as the empty-string token so the output is always a unit vector.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Result<Self, DenseError> {
        if dim == 0 {
            return Err(DenseError::Contract("embedder dim must be >= 1".into()));
        }
        Ok(Self { dim })
    }

    pub fn bucket(&self, token: &str) -> usize {
        let mut h = FnvHasher::default();
        h.write(token.as_bytes());
        (h.finish() % self.dim as u64) as usize
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, DenseError> {
        let mut values = vec![0.0; self.dim];
        let tokens = tokenize(text);
        if tokens.is_empty() {
            values[self.bucket("")] = 1.0;
        }
        for t in tokens.iter() {
            values[self.bucket(t)] += 1.0;
        }
        let n = norm(&values);
        values.iter_mut().for_each(|v| *v /= n);
        EmbeddingVector::new(values)
    }

    fn fingerprint(&self) -> String {
        format!("deterministic_test/fnv1a-buckets/dim={}", self.dim)
    }
}

type BatchResult = Result<Vec<EmbeddingVector>, DenseError>;

/// Client for an embeddings service speaking `{"model", "input": [...]}` →
/// `{"data": [{"embedding": [...]}, ...]}`.
pub struct HttpEmbedder {
    client: JsonClient,
    endpoint: String,
    model: String,
    dim: usize,
    api_key: Option<String>,
    batch_size: usize,
    max_in_flight: usize,
}

impl HttpEmbedder {
    pub fn new(spec: &EmbedderSpec) -> Result<Self, DenseError> {
        let endpoint = spec
            .endpoint
            .clone()
            .ok_or_else(|| DenseError::Contract("http_service embedder requires an endpoint".into()))?;
        let model = spec
            .model_name
            .clone()
            .ok_or_else(|| DenseError::Contract("http_service embedder requires a model_name".into()))?;
        Ok(Self {
            client: JsonClient::new(spec.retry)?,
            endpoint,
            model,
            dim: spec.dim,
            api_key: std::env::var(EMBEDDINGS_API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            batch_size: spec.batch_size.max(1),
            max_in_flight: spec.max_in_flight.max(1),
        })
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, DenseError> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(DenseError::Contract("cannot embed empty text".into()));
        }
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let resp = self.client.post_json(&self.endpoint, self.api_key.as_deref(), &body)?;
        let data = resp
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| DenseError::Contract("response has no data array".into()))?;
        if data.len() != texts.len() {
            return Err(DenseError::Contract(format!(
                "sent {} inputs, received {} embeddings",
                texts.len(),
                data.len()
            )));
        }
        data.iter()
            .map(|item| {
                let values: Vec<f64> = item
                    .get("embedding")
                    .and_then(|e| e.as_array())
                    .ok_or_else(|| DenseError::Contract("data item has no embedding array".into()))?
                    .iter()
                    .map(|v| {
                        v.as_f64()
                            .ok_or_else(|| DenseError::Contract("non-numeric embedding value".into()))
                    })
                    .collect::<Result<_, _>>()?;
                if values.len() != self.dim {
                    return Err(DenseError::DimensionMismatch {
                        expected: self.dim,
                        actual: values.len(),
                    });
                }
                EmbeddingVector::new(values)
            })
            .collect()
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, DenseError> {
        Ok(self.request(&[text])?.remove(0))
    }

    /// Sends batches of `batch_size` with at most `max_in_flight` requests outstanding.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, DenseError> {
        let batches: Vec<&[&str]> = texts.chunks(self.batch_size).collect();
        let results: Vec<Mutex<Option<BatchResult>>> = batches.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..self.max_in_flight.min(batches.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= batches.len() {
                        break;
                    }
                    let r = self.request(batches[i]);
                    let failed = r.is_err();
                    *results[i].lock().unwrap() = Some(r);
                    if failed {
                        next.store(batches.len(), Ordering::Relaxed);
                    }
                });
            }
        });
        let mut out = Vec::with_capacity(texts.len());
        for slot in results {
            // Unstarted batches after a failure stay None; the failing batch precedes them.
            if let Some(r) = slot.into_inner().unwrap() {
                out.extend(r?);
            }
        }
        if out.len() != texts.len() {
            return Err(DenseError::Contract("embedding batch aborted".into()));
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        format!("http_service/{}/dim={}", self.model, self.dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    DeterministicTest,
    HttpService,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    /// Prepended to query text before embedding (some models expect an instruction prefix).
    pub query_prefix: String,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::DeterministicTest,
            dim: 256,
            endpoint: None,
            model_name: None,
            query_prefix: String::new(),
            batch_size: 32,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

impl EmbedderSpec {
    pub fn validate(&self) -> Result<(), DenseError> {
        if self.dim == 0 {
            return Err(DenseError::Contract("embedder dim must be >= 1".into()));
        }
        if self.kind == EmbedderKind::HttpService && (self.endpoint.is_none() || self.model_name.is_none()) {
            return Err(DenseError::Contract(
                "http_service embedder requires endpoint and model_name".into(),
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>, DenseError> {
        self.validate()?;
        Ok(match self.kind {
            EmbedderKind::DeterministicTest => Box::new(HashingEmbedder::new(self.dim)?),
            EmbedderKind::HttpService => Box::new(HttpEmbedder::new(self)?),
        })
    }
}

pub fn embed(spec: &EmbedderSpec, text: &str) -> Result<EmbeddingVector, DenseError> {
    spec.build()?.embed(text)
}

/// Row-major vector store keyed by chunk id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseIndex {
    pub version: u32,
    pub dim: usize,
    #[serde(default)]
    pub embedder: String,
    pub chunk_ids: Vec<String>,
    pub vectors: Vec<f64>,
}

impl DenseIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            version: DENSE_INDEX_VERSION,
            dim,
            embedder: String::new(),
            chunk_ids: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.chunk_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunk_ids.is_empty()
    }

    pub fn insert(&mut self, chunk_id: impl Into<String>, v: &EmbeddingVector) -> Result<(), DenseError> {
        if v.dim() != self.dim {
            return Err(DenseError::DimensionMismatch {
                expected: self.dim,
                actual: v.dim(),
            });
        }
        let chunk_id = chunk_id.into();
        if self.chunk_ids.contains(&chunk_id) {
            return Err(DenseError::DuplicateChunk(chunk_id));
        }
        self.chunk_ids.push(chunk_id);
        self.vectors.extend_from_slice(v.values());
        Ok(())
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Embeds each `(chunk_id, text)` pair with `embedder`.
    pub fn build<'a>(
        embedder: &dyn Embedder,
        items: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, DenseError> {
        let (ids, texts): (Vec<&str>, Vec<&str>) = items.into_iter().unzip();
        let vectors = embedder.embed_batch(&texts)?;
        let mut index = Self::new(embedder.dim());
        index.embedder = embedder.fingerprint();
        let mut seen = std::collections::HashSet::new();
        for (id, v) in ids.into_iter().zip(&vectors) {
            if !seen.insert(id) {
                return Err(DenseError::DuplicateChunk(id.to_string()));
            }
            if v.dim() != index.dim {
                return Err(DenseError::DimensionMismatch {
                    expected: index.dim,
                    actual: v.dim(),
                });
            }
            index.chunk_ids.push(id.to_string());
            index.vectors.extend_from_slice(v.values());
        }
        Ok(index)
    }

    /// Exact top-k by `(1 + cos) / 2`, descending, ties by ascending chunk id.
    /// Stored zero vectors are skipped.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<(String, f64)>, DenseError> {
        if query.dim() != self.dim {
            return Err(DenseError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if query.norm() == 0.0 {
            return Err(DenseError::ZeroVector);
        }
        let mut scored = Vec::with_capacity(self.len());
        for (i, id) in self.chunk_ids.iter().enumerate() {
            match cosine_raw(query.values(), self.vector(i)) {
                Ok(cos) => scored.push((id.clone(), dense_score_from_cosine(cos))),
                Err(DenseError::ZeroVector) => continue,
                Err(e) => return Err(e),
            }
        }
        crate::sparse::sort_desc_by_score(&mut scored);
        scored.truncate(k);
        Ok(scored)
    }

    pub fn save(&self, path: &Path) -> Result<(), DenseError> {
        let persist = |message: String| DenseError::Persist {
            path: path.display().to_string(),
            message,
        };
        let json = serde_json::to_vec(self).map_err(|e| persist(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| persist(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DenseError> {
        let persist = |message: String| DenseError::Persist {
            path: path.display().to_string(),
            message,
        };
        let bytes = std::fs::read(path).map_err(|e| persist(e.to_string()))?;
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let header: Header = serde_json::from_slice(&bytes).map_err(|e| persist(e.to_string()))?;
        if header.version != DENSE_INDEX_VERSION {
            return Err(DenseError::Version(header.version));
        }
        let index: Self = serde_json::from_slice(&bytes).map_err(|e| persist(e.to_string()))?;
        if index.dim == 0 || index.vectors.len() != index.dim * index.chunk_ids.len() {
            return Err(persist(format!(
                "payload of {} values does not match {} ids x dim {}",
                index.vectors.len(),
                index.chunk_ids.len(),
                index.dim
            )));
        }
        Ok(index)
    }
}

pub fn dense_top_k(
    index: &DenseIndex,
    query_vec: &EmbeddingVector,
    k_dense: usize,
) -> Result<Vec<(String, f64)>, DenseError> {
    index.top_k(query_vec, k_dense)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[0.3, -1.2, 2.0]);
        let neg = v(&[-0.3, 1.2, -2.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&a, &v(&[0.0, 0.0, 0.0])),
            Err(DenseError::ZeroVector)
        ));
        assert!(matches!(
            cosine_similarity(&a, &v(&[1.0])),
            Err(DenseError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn hashing_embedder_is_deterministic_and_unit_norm() {
        let e = HashingEmbedder::new(64).unwrap();
        let a = e.embed("Heap overflow in libpng").unwrap();
        assert_eq!(a, e.embed("Heap overflow in libpng").unwrap());
        for text in ["", "x", "one two three two one", "CVE-2024-5022 spoofing"] {
            assert!((e.embed(text).unwrap().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn disjoint_buckets_give_zero_cosine() {
        let e = HashingEmbedder::new(64).unwrap();
        let left = ["buffer", "overflow"];
        let right = ["sql", "injection"];
        let lb: Vec<_> = left.iter().map(|t| e.bucket(t)).collect();
        let rb: Vec<_> = right.iter().map(|t| e.bucket(t)).collect();
        assert!(lb.iter().all(|b| !rb.contains(b)), "fixture collides: {lb:?} {rb:?}");
        let cos = cosine_similarity(&e.embed("buffer overflow").unwrap(), &e.embed("sql injection").unwrap()).unwrap();
        assert_eq!(cos, 0.0);
    }

    #[test]
    fn top_k_orders_by_mapped_cosine() {
        // Unit vectors at cosines 0.9, 0.5, 0.0, -0.5 to the query e1.
        let at = |c: f64| v(&[c, (1.0 - c * c).sqrt()]);
        let mut idx = DenseIndex::new(2);
        idx.insert("c", &at(0.0)).unwrap();
        idx.insert("a", &at(0.9)).unwrap();
        idx.insert("d", &at(-0.5)).unwrap();
        idx.insert("b", &at(0.5)).unwrap();
        let top = idx.top_k(&v(&[1.0, 0.0]), 3).unwrap();
        let ids: Vec<_> = top.iter().map(|t| t.0.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        for (got, want) in top.iter().map(|t| t.1).zip([0.95, 0.75, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn self_query_scores_one_and_k_truncates() {
        let e = HashingEmbedder::new(32).unwrap();
        let texts = ["alpha", "beta gamma", "delta", "epsilon zeta", "eta theta iota"];
        let ids = ["0", "1", "2", "3", "4"];
        let idx = DenseIndex::build(&e, ids.iter().copied().zip(texts.iter().copied())).unwrap();
        let q = e.embed("delta").unwrap();
        let top = idx.top_k(&q, 1).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].0, "2");
        assert!((top[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_index_and_dim_checks() {
        let idx = DenseIndex::new(3);
        assert!(idx.top_k(&v(&[1.0, 0.0, 0.0]), 5).unwrap().is_empty());
        assert!(matches!(
            idx.top_k(&v(&[1.0, 0.0]), 5),
            Err(DenseError::DimensionMismatch { .. })
        ));
        let mut idx = DenseIndex::new(3);
        assert!(idx.insert("x", &v(&[1.0])).is_err());
    }

    #[test]
    fn persistence_round_trip() {
        let e = HashingEmbedder::new(8).unwrap();
        let idx = DenseIndex::build(&e, [("a", "one"), ("b", "two")]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dense.json");
        idx.save(&path).unwrap();
        assert_eq!(DenseIndex::load(&path).unwrap(), idx);
    }

    #[test]
    fn http_spec_requires_endpoint() {
        let spec = EmbedderSpec {
            kind: EmbedderKind::HttpService,
            ..Default::default()
        };
        assert!(spec.build().is_err());
    }
}
