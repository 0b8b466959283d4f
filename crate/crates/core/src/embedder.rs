//! Text embedding providers.
//!
//! Three implementations sit behind [`Embedder`]:
//!
//! - [`HashEmbedder`]: salted feature hashing of lowercase whitespace tokens,
//!   deterministic and dependency-free; the default for tests and desk runs.
//! - [`FileEmbedder`]: precomputed vectors looked up by exact text.
//! - [`HttpEmbedder`]: a remote `/embeddings` endpoint.
//!
//! One provider instance is shared by graph construction, the mock
//! environment and the reward.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::corpus::CandidateExample;
use crate::http::{self, HttpFailure, InFlightLimit, RetryPolicy};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no precomputed vector for text {0:?}")]
    Lookup(String),
    #[error("embedding transport error (status {status:?}): {message}")]
    Transport { status: Option<u16>, message: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid embedding: {0}")]
    Invalid(String),
    #[error("failed to read {path}: {message}")]
    Io { path: String, message: String },
}

/// A finite real vector of the provider's dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::Invalid(format!("entry {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn normalized(mut self, normalization: Normalization) -> Self {
        if normalization == Normalization::L2 {
            let n = self.norm();
            if n > 0.0 {
                self.0.iter_mut().for_each(|v| *v /= n);
            }
        }
        self
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbedError> {
    cosine_slices(u.as_slice(), v.as_slice())
}

pub fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::Argument(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Text fed to the provider for a candidate example.
pub fn example_text(example: &CandidateExample) -> String {
    format!(
        "{}\n{}\n{}",
        example.query,
        example.context.as_deref().unwrap_or(""),
        example.response
    )
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;

    fn embed_example(&self, example: &CandidateExample) -> Result<EmbeddingVector, EmbedError> {
        self.embed_text(&example_text(example))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    L2,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    #[default]
    Hash,
    File,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub normalization: Normalization,
    /// Hash provider salt.
    pub salt: u64,
    /// File provider path.
    pub path: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hash,
            dim: 32,
            normalization: Normalization::L2,
            salt: 0,
            path: None,
            base_url: None,
            model: None,
            token_env: None,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim < 2 {
            return Err(EmbedError::Argument("embedding dim must be at least 2".into()));
        }
        match self.kind {
            EmbedderKind::File if self.path.is_none() => {
                Err(EmbedError::Argument("file embedder needs `path`".into()))
            }
            EmbedderKind::Http if self.base_url.is_none() || self.model.is_none() => Err(
                EmbedError::Argument("http embedder needs `base_url` and `model`".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Embedder>, EmbedError> {
        self.validate()?;
        Ok(match self.kind {
            EmbedderKind::Hash => {
                Arc::new(HashEmbedder::new(self.dim, self.salt).with_normalization(self.normalization))
            }
            EmbedderKind::File => Arc::new(FileEmbedder::load(
                self.path.as_ref().expect("validated"),
                self.dim,
                self.normalization,
            )?),
            EmbedderKind::Http => Arc::new(HttpEmbedder::new(self)?),
        })
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(salt: u64, bytes: &[u8]) -> u64 {
    salt.to_le_bytes()
        .iter()
        .chain(bytes)
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Bag-of-words feature hashing: lowercase, split on whitespace, FNV-1a
/// (salt bytes first) into `dim` buckets, count, l2-normalize.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    salt: u64,
    normalization: Normalization,
}

impl HashEmbedder {
    pub fn new(dim: usize, salt: u64) -> Self {
        assert!(dim > 0, "dim must be positive");
        Self {
            dim,
            salt,
            normalization: Normalization::L2,
        }
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut counts = vec![0.0; self.dim];
        for token in text.to_lowercase().split_whitespace() {
            let bucket = fnv1a(self.salt, token.as_bytes()) % self.dim as u64;
            counts[bucket as usize] += 1.0;
        }
        Ok(EmbeddingVector(counts).normalized(self.normalization))
    }
}

#[derive(Deserialize)]
struct FileRecord {
    text: String,
    vector: Vec<f64>,
}

/// Precomputed vectors from a JSON-lines file of `{"text", "vector"}`.
#[derive(Debug, Clone)]
pub struct FileEmbedder {
    dim: usize,
    vectors: HashMap<String, EmbeddingVector>,
}

impl FileEmbedder {
    pub fn load(path: &Path, dim: usize, normalization: Normalization) -> Result<Self, EmbedError> {
        let text = fs::read_to_string(path).map_err(|e| EmbedError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut vectors = HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: FileRecord = serde_json::from_str(line)
                .map_err(|e| EmbedError::Invalid(format!("line {}: {e}", i + 1)))?;
            if rec.vector.len() != dim {
                return Err(EmbedError::Invalid(format!(
                    "line {}: vector has length {}, expected {dim}",
                    i + 1,
                    rec.vector.len()
                )));
            }
            vectors.insert(rec.text, EmbeddingVector::new(rec.vector)?.normalized(normalization));
        }
        Ok(Self { dim, vectors })
    }
}

impl Embedder for FileEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.vectors
            .get(text)
            .cloned()
            .ok_or_else(|| EmbedError::Lookup(text.chars().take(80).collect()))
    }
}

/// Client for an OpenAI-style `POST {base}/embeddings` endpoint returning
/// one pooled vector per input.
#[derive(Debug)]
pub struct HttpEmbedder {
    client: Client,
    url: String,
    model: String,
    token: Option<String>,
    dim: usize,
    normalization: Normalization,
    retry: RetryPolicy,
    limit: InFlightLimit,
}

impl HttpEmbedder {
    pub fn new(config: &EmbedderConfig) -> Result<Self, EmbedError> {
        let base = config
            .base_url
            .as_deref()
            .ok_or_else(|| EmbedError::Argument("missing base_url".into()))?;
        let token = match &config.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                EmbedError::Argument(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        Ok(Self {
            client: Client::new(),
            url: format!("{}/embeddings", base.trim_end_matches('/')),
            model: config.model.clone().unwrap_or_default(),
            token,
            dim: config.dim,
            normalization: config.normalization,
            retry: config.retry,
            limit: InFlightLimit::new(config.max_in_flight),
        })
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let body = json!({ "model": self.model, "input": [text] });
        let _permit = self.limit.acquire();
        let (value, _) = http::post_json(&self.client, &self.url, self.token.as_deref(), &body, &self.retry)
            .map_err(|f| match f {
                HttpFailure::Request { status, body } => EmbedError::Transport {
                    status: Some(status),
                    message: body,
                },
                HttpFailure::Transport { status, message, .. } => {
                    EmbedError::Transport { status, message }
                }
                HttpFailure::Decode(message) => EmbedError::Invalid(message),
            })?;
        let values: Vec<f64> = value["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| EmbedError::Invalid("response lacks data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| EmbedError::Invalid("non-numeric entry".into())))
            .collect::<Result<_, _>>()?;
        if values.len() != self.dim {
            return Err(EmbedError::Invalid(format!(
                "remote vector has length {}, expected {}",
                values.len(),
                self.dim
            )));
        }
        Ok(EmbeddingVector::new(values)?.normalized(self.normalization))
    }
}
