//! Text embeddings and cosine similarity.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::gateway::{InflightLimit, RetryPolicy};
use crate::types::word_units;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;

    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

/// `a·b / (‖a‖‖b‖)`, or 0 when either vector has zero norm.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "cannot compare embeddings of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let sq = |v: &EmbeddingVector| v.0.iter().map(|x| x * x).sum::<f64>();
    let (na2, nb2) = (sq(a), sq(b));
    if na2 == 0.0 || nb2 == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    // sqrt(s·s) == s in IEEE arithmetic, so a vector against itself gives exactly 1
    Ok((dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0))
}

pub const HASHED_DIM: usize = 256;

/// Deterministic bag-of-words embedder: lowercase Unicode words hashed
/// (FNV-1a, 64-bit, then a finalizer mix so the low bits spread) into buckets, weighted `ln(1 + count)`, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedBagEmbedder {
    dim: usize,
}

impl Default for HashedBagEmbedder {
    fn default() -> Self {
        Self { dim: HASHED_DIM }
    }
}

impl HashedBagEmbedder {
    pub fn with_dim(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (mix64(fnv1a(token.to_lowercase().as_bytes())) % self.dim as u64) as usize
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix64(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^ (h >> 33)
}

impl Embedder for HashedBagEmbedder {
    fn name(&self) -> &str {
        "hashed-bag"
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for u in word_units(text) {
            *counts.entry(u.surface.to_lowercase()).or_default() += 1;
        }
        let mut v = vec![0.0; self.dim];
        for (tok, n) in &counts {
            v[self.bucket(tok)] += (1.0 + *n as f64).ln();
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        Ok(EmbeddingVector(v))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteEmbedderConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout() -> u64 {
    60
}

/// Client for `POST {base_url}/v1/embeddings`.
pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    limit: Arc<InflightLimit>,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Result<Self> {
        Ok(Self {
            client: crate::gateway::openai_http_client(config.timeout_secs)?,
            limit: Arc::new(InflightLimit::new(config.max_in_flight)),
            retry: RetryPolicy::default(),
            config,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl Embedder for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let url = format!(
            "{}/v1/embeddings",
            self.config.base_url.trim_end_matches('/')
        );
        let body = json!({"model": self.config.model, "input": text});
        let request_id = crate::gateway::openai_request_id();
        let _permit = self.limit.acquire();
        let value = self.retry.run(|_| {
            crate::gateway::openai_post_json(
                &self.client,
                &url,
                self.config.api_key.as_deref(),
                &request_id,
                &body,
            )
        })?;
        let resp: EmbeddingResponse = serde_json::from_value(value)
            .map_err(|e| Error::backend(format!("malformed embedding response: {e}")))?;
        let datum = resp
            .data
            .into_iter()
            .next()
            .ok_or_else(|| Error::backend("embedding response without data"))?;
        if datum.embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::backend("embedding contains non-finite values"));
        }
        Ok(EmbeddingVector(datum.embedding))
    }
}
