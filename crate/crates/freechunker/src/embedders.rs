//! Embedding sources: the deterministic toy embedder used by tests and the
//! synthetic harness, teacher oracles for distillation, and a client for
//! OpenAI-compatible remote embedding services.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Matrix;
use crate::patterns::ChunkPattern;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EmbedderError {
    #[error("empty text batch")]
    EmptyBatch,
    #[error("remote service rejected request: HTTP {status}: {body_excerpt}")]
    RemoteRejected { status: u16, body_excerpt: String },
    #[error("remote service unavailable after {attempts} attempts: {last_error}")]
    RemoteUnavailable { attempts: usize, last_error: String },
    #[error("malformed remote response: {0}")]
    MalformedResponse(String),
    #[error("missing API key environment variable {0}")]
    MissingApiKey(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    /// "toy" | "remote:<model>" | "teacher".
    pub source: String,
}

impl EmbeddingVector {
    /// Construct and L2-normalize. Panics on a zero vector.
    pub fn new(mut values: Vec<f32>, source: impl Into<String>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(norm > 0.0, "zero embedding vector");
        for v in &mut values {
            *v /= norm;
        }
        EmbeddingVector {
            values,
            source: source.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_unit(&self) -> bool {
        let norm = self.values.iter().map(|v| v * v).sum::<f32>().sqrt();
        (norm - 1.0).abs() <= 1e-6
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f32 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }
}

pub trait TextEmbedder: Send + Sync {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedderError>;
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedderError> {
        Ok(self.embed_batch(&[text])?.pop().unwrap())
    }
}

// ---------------------------------------------------------------------------
// Toy embedder
// ---------------------------------------------------------------------------

/// FNV-1a 64-bit. Explicit so vectors are stable across platforms and Rust
/// versions.
fn fnv1a64(bytes: &[u8], seed: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 stream seeded by the text hash; Box-Muller turns it into
/// Gaussian coordinates.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn unit_f64(bits: u64) -> f64 {
    // 53 high bits -> [0, 1)
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic pseudo-random unit vector from the trimmed text bytes and a
/// seed. Pure function of (bytes, d, seed).
pub fn toy_embed(text: &str, d: usize, seed: u64) -> EmbeddingVector {
    assert!(d >= 2, "toy embedding dimension must be >= 2");
    let mut state = fnv1a64(text.trim().as_bytes(), seed);
    let mut values = Vec::with_capacity(d);
    while values.len() < d {
        let u1 = unit_f64(splitmix64(&mut state)).max(f64::MIN_POSITIVE);
        let u2 = unit_f64(splitmix64(&mut state));
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        values.push((r * theta.cos()) as f32);
        if values.len() < d {
            values.push((r * theta.sin()) as f32);
        }
    }
    EmbeddingVector::new(values, "toy")
}

#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    pub d: usize,
    pub seed: u64,
}

impl TextEmbedder for ToyEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedderError> {
        if texts.is_empty() {
            return Err(EmbedderError::EmptyBatch);
        }
        Ok(texts
            .iter()
            .map(|t| toy_embed(t, self.d, self.seed))
            .collect())
    }

    fn dimension(&self) -> usize {
        self.d
    }
}

impl TextEmbedder for Box<dyn TextEmbedder> {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedderError> {
        (**self).embed_batch(texts)
    }

    fn dimension(&self) -> usize {
        (**self).dimension()
    }
}

/// Wrapper that counts base-embedder calls (one per text), used to verify
/// the sentence-reuse contract.
pub struct CountingEmbedder<E> {
    inner: E,
    count: AtomicUsize,
}

impl<E: TextEmbedder> CountingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        CountingEmbedder {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

impl<E: TextEmbedder> TextEmbedder for CountingEmbedder<E> {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedderError> {
        self.count.fetch_add(texts.len(), Ordering::Relaxed);
        self.inner.embed_batch(texts)
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }
}

// ---------------------------------------------------------------------------
// Teacher oracles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    /// Normalized arithmetic mean of the pattern's sentence embeddings.
    MeanPool,
    /// Embed the space-joined concatenation of the pattern's sentence texts.
    RemoteConcat,
}

/// Mean-pool teacher: normalized mean of the pattern's rows of E.
pub fn mean_pool_teacher<T: Scalar>(e: &Matrix<T>, pattern: &ChunkPattern) -> Vec<T> {
    let d = e.cols;
    let mut acc = vec![T::zero(); d];
    for &idx in &pattern.sentence_indices {
        for (a, &v) in acc.iter_mut().zip(e.row(idx)) {
            *a += v;
        }
    }
    let norm = acc.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm > T::zero() {
        for v in &mut acc {
            *v /= norm;
        }
    }
    acc
}

/// Paper-faithful teacher: embed the concatenated span text (single-space
/// joiner) with the given embedder.
pub fn concat_teacher(
    sentence_texts: &[&str],
    pattern: &ChunkPattern,
    embedder: &dyn TextEmbedder,
) -> Result<EmbeddingVector, EmbedderError> {
    let joined = pattern
        .sentence_indices
        .iter()
        .map(|&i| sentence_texts[i])
        .collect::<Vec<_>>()
        .join(" ");
    let mut v = embedder.embed(&joined)?;
    v.source = "teacher".to_string();
    Ok(v)
}

// ---------------------------------------------------------------------------
// Remote OpenAI-compatible client
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEmbedderConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key; empty disables
    /// the Authorization header.
    pub api_key_env: String,
    pub batch_size: usize,
    pub timeout_secs: u64,
    pub retries: usize,
    /// Initial backoff; doubles per retry.
    pub backoff_ms: u64,
}

impl Default for RemoteEmbedderConfig {
    fn default() -> Self {
        RemoteEmbedderConfig {
            base_url: "http://localhost:8080/v1".to_string(),
            model: "bge-m3".to_string(),
            api_key_env: "FREECHUNKER_API_KEY".to_string(),
            batch_size: 32,
            timeout_secs: 30,
            retries: 3,
            backoff_ms: 250,
        }
    }
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f32>,
    index: usize,
}

pub struct RemoteEmbedder {
    cfg: RemoteEmbedderConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    dimension: std::sync::OnceLock<usize>,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteEmbedderConfig) -> Result<Self, EmbedderError> {
        assert!(cfg.batch_size >= 1);
        let api_key = if cfg.api_key_env.is_empty() {
            None
        } else {
            std::env::var(&cfg.api_key_env).ok()
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| EmbedderError::RemoteUnavailable {
                attempts: 0,
                last_error: e.to_string(),
            })?;
        Ok(RemoteEmbedder {
            cfg,
            client,
            api_key,
            dimension: std::sync::OnceLock::new(),
        })
    }

    fn post_once(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedderError> {
        let url = format!("{}/embeddings", self.cfg.base_url.trim_end_matches('/'));
        let body = EmbeddingsRequest {
            model: &self.cfg.model,
            input: texts,
        };
        let mut req = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| EmbedderError::RemoteUnavailable {
            attempts: 1,
            last_error: e.to_string(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            let excerpt: String = body.chars().take(200).collect();
            return Err(EmbedderError::RemoteRejected {
                status: status.as_u16(),
                body_excerpt: excerpt,
            });
        }
        let parsed: EmbeddingsResponse = resp
            .json()
            .map_err(|e| EmbedderError::MalformedResponse(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(EmbedderError::MalformedResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        let mut items = parsed.data;
        items.sort_by_key(|item| item.index);
        let dim = items[0].embedding.len();
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            if item.embedding.len() != dim {
                return Err(EmbedderError::MalformedResponse(format!(
                    "inconsistent embedding dimensions: {} vs {}",
                    item.embedding.len(),
                    dim
                )));
            }
            out.push(EmbeddingVector::new(
                item.embedding,
                format!("remote:{}", self.cfg.model),
            ));
        }
        Ok(out)
    }

    fn post_with_retries(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedderError> {
        let attempts = self.cfg.retries + 1;
        let mut backoff = Duration::from_millis(self.cfg.backoff_ms);
        let mut last_error = String::new();
        for attempt in 0..attempts {
            match self.post_once(texts) {
                Ok(v) => return Ok(v),
                // 429 and 5xx are retryable; other rejections are final.
                Err(EmbedderError::RemoteRejected { status, body_excerpt })
                    if status == 429 || status >= 500 =>
                {
                    last_error = format!("HTTP {status}: {body_excerpt}");
                }
                Err(EmbedderError::RemoteUnavailable { last_error: e, .. }) => {
                    last_error = e;
                }
                Err(other) => return Err(other),
            }
            if attempt + 1 < attempts {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
        }
        Err(EmbedderError::RemoteUnavailable {
            attempts,
            last_error,
        })
    }
}

impl TextEmbedder for RemoteEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedderError> {
        if texts.is_empty() {
            return Err(EmbedderError::EmptyBatch);
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.cfg.batch_size) {
            out.extend(self.post_with_retries(chunk)?);
        }
        let _ = self.dimension.set(out[0].dim());
        Ok(out)
    }

    fn dimension(&self) -> usize {
        *self.dimension.get().unwrap_or(&0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::build_explicit_patterns;

    #[test]
    fn toy_embed_deterministic() {
        let a = toy_embed("a", 8, 0);
        let b = toy_embed("a", 8, 0);
        assert_eq!(a, b);
        assert_ne!(a, toy_embed("a", 8, 1));
        assert_ne!(a, toy_embed("b", 8, 0));
    }

    #[test]
    fn toy_embed_unit_norm() {
        for text in ["", "x", "hello world", "🤖 unicode"] {
            assert!(toy_embed(text, 16, 7).is_unit());
        }
    }

    #[test]
    fn toy_embed_trims_whitespace() {
        assert_eq!(toy_embed("  abc ", 8, 0), toy_embed("abc", 8, 0));
    }

    #[test]
    fn toy_embed_spread() {
        // 10^3 distinct strings in d=64: pairwise cosines stay below 0.7.
        let d = 64;
        let vecs: Vec<EmbeddingVector> =
            (0..1000).map(|i| toy_embed(&format!("string-{i}"), d, 0)).collect();
        let mut max_abs = 0.0f32;
        for i in 0..vecs.len() {
            for j in (i + 1)..vecs.len() {
                max_abs = max_abs.max(vecs[i].cosine(&vecs[j]).abs());
            }
        }
        assert!(max_abs < 0.7, "max |cos| = {max_abs}");
    }

    #[test]
    fn mean_pool_singleton_is_row() {
        let e = Matrix::from_rows(&[vec![1.0f64, 0.0], vec![0.0, 1.0]]);
        let p = &build_explicit_patterns(2, &[vec![1]]).unwrap().patterns[0];
        assert_eq!(mean_pool_teacher(&e, p), vec![0.0, 1.0]);
    }

    #[test]
    fn mean_pool_normalized_mean() {
        let e = Matrix::from_rows(&[vec![1.0f64, 0.0], vec![0.0, 1.0]]);
        let p = &build_explicit_patterns(2, &[vec![0, 1]]).unwrap().patterns[0];
        let t = mean_pool_teacher(&e, p);
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        assert!((t[0] - inv_sqrt2).abs() < 1e-12);
        assert!((t[1] - inv_sqrt2).abs() < 1e-12);
    }

    #[test]
    fn mean_pool_identical_rows() {
        let row = vec![0.6f64, 0.8];
        let e = Matrix::from_rows(&[row.clone(), row.clone(), row.clone()]);
        let p = &build_explicit_patterns(3, &[vec![0, 1, 2]]).unwrap().patterns[0];
        let t = mean_pool_teacher(&e, p);
        assert!((t[0] - 0.6).abs() < 1e-12);
        assert!((t[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn concat_teacher_joins_with_spaces() {
        let embedder = ToyEmbedder { d: 8, seed: 0 };
        let texts = ["One.", "Two.", "Three."];
        let p = &build_explicit_patterns(3, &[vec![0, 2]]).unwrap().patterns[0];
        let t = concat_teacher(&texts, p, &embedder).unwrap();
        assert_eq!(t.values, toy_embed("One. Three.", 8, 0).values);
        assert_eq!(t.source, "teacher");
    }

    #[test]
    fn counting_embedder_counts_texts() {
        let counter = CountingEmbedder::new(ToyEmbedder { d: 4, seed: 0 });
        counter.embed_batch(&["a", "b", "c"]).unwrap();
        counter.embed("d").unwrap();
        assert_eq!(counter.calls(), 4);
    }

    #[test]
    fn empty_batch_rejected() {
        let embedder = ToyEmbedder { d: 4, seed: 0 };
        assert!(matches!(
            embedder.embed_batch(&[]),
            Err(EmbedderError::EmptyBatch)
        ));
    }
}
