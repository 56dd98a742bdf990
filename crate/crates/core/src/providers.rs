//! Embedding and classification providers.
//!
//! Real deployments plug in CLIP-like encoders and an emotion
//! classifier through these traits. The bundled stubs derive
//! deterministic pseudo-embeddings from content hashes so the full
//! pipeline and the evaluation harness run offline.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::clients::{decode_f64_array, response_field, ClientError, JsonClient, TransportConfig};
use crate::kg::EmotionLabels;
use crate::vecmath::l2_norm;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Maps images and texts into one shared embedding space.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_image(&self, path: &Path) -> Result<Vec<f64>, ProviderError>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
}

/// Predicts an emotion label (plus per-label scores) for an image.
pub trait ClassifierClient: Send + Sync {
    fn classify(&self, path: &Path) -> Result<(String, BTreeMap<String, f64>), ProviderError>;
}

/// 64-bit FNV-1a hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic unit vector derived from a text hash.
pub fn hashed_unit_vector(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(text.to_lowercase().as_bytes()) ^ seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = l2_norm(&v);
    if n < crate::vecmath::ZERO_NORM_EPS {
        v[0] = 1.0;
        return v;
    }
    for x in &mut v {
        *x /= n;
    }
    v
}

/// Hash-based stand-in for a real joint encoder. Text embeddings hash the
/// lowercased text, image embeddings hash the file bytes; both are unit
/// vectors and deterministic across runs and machines.
pub struct StubEmbedder {
    dim: usize,
    seed: u64,
}

impl StubEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        StubEmbedder { dim, seed }
    }
}

impl EmbeddingProvider for StubEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, path: &Path) -> Result<Vec<f64>, ProviderError> {
        let bytes = std::fs::read(path).map_err(|source| ProviderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&bytes) ^ self.seed);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = l2_norm(&v);
        if n < crate::vecmath::ZERO_NORM_EPS {
            v[0] = 1.0;
        } else {
            for x in &mut v {
                *x /= n;
            }
        }
        Ok(v)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        Ok(hashed_unit_vector(text, self.dim, self.seed))
    }
}

/// Hash-based classifier stub: assigns each image a deterministic label
/// from the configured set, with a matching score vector.
pub struct StubClassifier {
    labels: EmotionLabels,
    seed: u64,
}

impl StubClassifier {
    pub fn new(labels: EmotionLabels, seed: u64) -> Self {
        StubClassifier { labels, seed }
    }
}

impl ClassifierClient for StubClassifier {
    fn classify(&self, path: &Path) -> Result<(String, BTreeMap<String, f64>), ProviderError> {
        let bytes = std::fs::read(path).map_err(|source| ProviderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let labels = self.labels.labels();
        let winner = (fnv1a64(&bytes) ^ self.seed) as usize % labels.len();
        let mut scores = BTreeMap::new();
        for (i, label) in labels.iter().enumerate() {
            scores.insert(label.clone(), if i == winner { 0.9 } else { 0.1 / 7.0 });
        }
        Ok((labels[winner].clone(), scores))
    }
}

/// Classifier over the wire envelope
/// `{"image_path"} -> {"label", "scores"}`.
pub struct JsonClassifier {
    client: JsonClient,
}

impl JsonClassifier {
    pub fn new(cfg: &TransportConfig) -> Result<Self, ProviderError> {
        Ok(JsonClassifier {
            client: JsonClient::from_config(cfg)?,
        })
    }
}

impl ClassifierClient for JsonClassifier {
    fn classify(&self, path: &Path) -> Result<(String, BTreeMap<String, f64>), ProviderError> {
        let req = serde_json::json!({ "image_path": path.display().to_string() });
        let resp = self.client.call(&req)?;
        let label = response_field(&resp, "label")?
            .as_str()
            .ok_or_else(|| ClientError::BadResponse {
                message: "label is not a string".into(),
            })?
            .to_string();
        let mut scores = BTreeMap::new();
        if let Some(map) = resp.get("scores").and_then(|v| v.as_object()) {
            for (k, v) in map {
                let val = v.as_f64().ok_or_else(|| ClientError::BadResponse {
                    message: format!("score for {k:?} is not numeric"),
                })?;
                scores.insert(k.clone(), val);
            }
        }
        Ok((label, scores))
    }
}

/// Embedding provider over a wire envelope:
/// `{"image_path"} -> {"embedding"}` and `{"text"} -> {"embedding"}`.
pub struct JsonEmbedder {
    client: JsonClient,
    dim: usize,
}

impl JsonEmbedder {
    pub fn new(cfg: &TransportConfig, dim: usize) -> Result<Self, ProviderError> {
        Ok(JsonEmbedder {
            client: JsonClient::from_config(cfg)?,
            dim,
        })
    }

    fn decode(&self, resp: &serde_json::Value) -> Result<Vec<f64>, ProviderError> {
        let emb = response_field(resp, "embedding")?;
        let v = decode_f64_array(emb, "embedding")?;
        if v.len() != self.dim {
            return Err(ClientError::BadResponse {
                message: format!("embedding has dimension {}, expected {}", v.len(), self.dim),
            }
            .into());
        }
        Ok(v)
    }
}

impl EmbeddingProvider for JsonEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, path: &Path) -> Result<Vec<f64>, ProviderError> {
        let req = serde_json::json!({ "image_path": path.display().to_string() });
        let resp = self.client.call(&req)?;
        self.decode(&resp)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let req = serde_json::json!({ "text": text });
        let resp = self.client.call(&req)?;
        self.decode(&resp)
    }
}
