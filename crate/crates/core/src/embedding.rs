//! Text encoders behind one provider interface.
//!
//! Every encoding in the pipeline (chain states, DSSM features, nearest-node
//! lookup, the BERTScore proxy) goes through a [`TextEncoder`]. Two providers
//! exist: [`HashEncoder`], an offline bag-of-tokens encoder used for all
//! training and tests, and [`RemoteEncoder`], a blocking HTTP client.
//!
//! The hash encoder is order-invariant: permuting the tokens of a text yields
//! the same vector.

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LsimError, Result};
use crate::metrics::tokenize;

pub const ENCODER_ENDPOINT_ENV: &str = "ENCODER_ENDPOINT";
pub const ENCODER_API_KEY_ENV: &str = "ENCODER_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(LsimError::InvalidInput("embedding must have positive dim".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LsimError::NonFinite("embedding".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode(&self, text: &str) -> Result<EmbeddingVector>;

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.encode(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderProvider {
    Deterministic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub provider: EncoderProvider,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub normalize: bool,
    /// Seed of the token hash; only used by the deterministic provider.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            provider: EncoderProvider::Deterministic,
            dim: 128,
            endpoint: None,
            normalize: true,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn deterministic(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(LsimError::Config("encoder dim must be positive".into()));
        }
        if self.provider == EncoderProvider::Remote && self.resolved_endpoint().is_none() {
            return Err(LsimError::Config(format!(
                "remote encoder requires an endpoint (config or {ENCODER_ENDPOINT_ENV})"
            )));
        }
        Ok(())
    }

    fn resolved_endpoint(&self) -> Option<String> {
        self.endpoint
            .clone()
            .or_else(|| std::env::var(ENCODER_ENDPOINT_ENV).ok())
    }

    pub fn build(&self) -> Result<Box<dyn TextEncoder>> {
        self.validate()?;
        Ok(match self.provider {
            EncoderProvider::Deterministic => {
                Box::new(HashEncoder::new(self.dim, self.seed).with_normalize(self.normalize))
            }
            EncoderProvider::Remote => {
                let endpoint = self.resolved_endpoint().expect("validated");
                let mut remote = RemoteEncoder::new(endpoint, self.dim);
                remote.api_key = std::env::var(ENCODER_API_KEY_ENV).ok();
                remote.normalize = self.normalize;
                Box::new(remote)
            }
        })
    }
}

/// One-shot encoding through a freshly built provider.
pub fn encode_text(text: &str, config: &EncoderConfig) -> Result<EmbeddingVector> {
    config.build()?.encode(text)
}

#[derive(Debug, Clone)]
pub struct HashEncoder {
    dim: usize,
    seed: u64,
    normalize: bool,
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "encoder dim must be positive");
        Self {
            dim,
            seed,
            normalize: true,
        }
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize_in_place(&mut v);
        v
    }
}

impl TextEncoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(LsimError::Encoder("cannot encode empty text".into()));
        }
        let mut tokens = tokenize(trimmed).tokens;
        if tokens.is_empty() {
            // punctuation-only text: hash it whole
            tokens.push(trimmed.to_string());
        }
        let mut acc = vec![0.0; self.dim];
        for token in &tokens {
            for (a, t) in acc.iter_mut().zip(self.token_vector(token)) {
                *a += t;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        if self.normalize {
            normalize_in_place(&mut acc);
        }
        EmbeddingVector::new(acc)
    }
}

fn normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Blocking client for an encoder service.
///
/// Wire format: `POST {endpoint}` with body `{"text": "..."}`, answered by
/// `{"vector": [f64, ...]}`. An API key, when present, is sent as a bearer token.
#[derive(Debug, Clone)]
pub struct RemoteEncoder {
    pub endpoint: String,
    pub dim: usize,
    pub api_key: Option<String>,
    pub normalize: bool,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EncodeResponse {
    vector: Vec<f64>,
}

impl RemoteEncoder {
    pub fn new(endpoint: impl Into<String>, dim: usize) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .expect("http client");
        Self {
            endpoint: endpoint.into(),
            dim,
            api_key: None,
            normalize: false,
            client,
        }
    }
}

impl TextEncoder for RemoteEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(LsimError::Encoder("cannot encode empty text".into()));
        }
        let mut request = self.client.post(&self.endpoint).json(&EncodeRequest { text });
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| LsimError::Encoder(format!("{}: {e}", self.endpoint)))?;
        let body: EncodeResponse = response
            .json()
            .map_err(|e| LsimError::Encoder(format!("bad response body: {e}")))?;
        if body.vector.len() != self.dim {
            return Err(LsimError::Encoder(format!(
                "remote returned dim {}, configured dim {}",
                body.vector.len(),
                self.dim
            )));
        }
        let mut values = body.vector;
        if self.normalize {
            normalize_in_place(&mut values);
        }
        EmbeddingVector::new(values)
    }
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_slices(a.values(), b.values())
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LsimError::ShapeMismatch(format!(
            "cosine of dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(LsimError::InvalidInput("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
