//! Frozen text-encoder interface and the desk-scale hashing embedder.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Token embeddings for one prompt, `max_tokens x dim`, zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    values: Vec<f64>,
    tokens: usize,
    dim: usize,
    source_prompt: String,
}

impl ConditionEmbedding {
    pub fn new(values: Vec<f64>, tokens: usize, dim: usize, source_prompt: String) -> Self {
        assert_eq!(values.len(), tokens * dim, "embedding buffer size");
        Self {
            values,
            tokens,
            dim,
            source_prompt,
        }
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source_prompt(&self) -> &str {
        &self.source_prompt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(1, tokens, dim)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_vec(self.values.clone(), (1, self.tokens, self.dim), device)?
                .to_dtype(dtype)?,
        )
    }

    /// Stacks embeddings into `(N, tokens, dim)`.
    pub fn stack(items: &[&ConditionEmbedding], dtype: DType, device: &Device) -> Result<Tensor> {
        let parts = items
            .iter()
            .map(|e| e.to_tensor(dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }
}

/// Frozen prompt encoder.
pub trait TextEncoder: Send + Sync {
    fn embed(&self, prompt: &str) -> ConditionEmbedding;
    fn dim(&self) -> usize;
    fn max_tokens(&self) -> usize;
}

/// Deterministic whitespace-token hashing embedder.
///
/// Each token maps to a pseudo-random unit-scale vector seeded from its
/// SHA-256. Percentage tokens (`70%`) additionally carry a smooth numeric code
/// in their first four coordinates so nearby scores embed nearby, standing in
/// for the numeric semantics a pretrained text encoder has. Tokens past
/// `max_tokens` are folded into the last slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashingTextEncoder {
    dim: usize,
    max_tokens: usize,
}

impl Default for HashingTextEncoder {
    fn default() -> Self {
        Self {
            dim: 32,
            max_tokens: 24,
        }
    }
}

impl HashingTextEncoder {
    pub fn new(dim: usize, max_tokens: usize) -> Self {
        assert!(dim >= 4 && max_tokens >= 1);
        Self { dim, max_tokens }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let percent = parse_percent(token);
        let key = if percent.is_some() { "<percent>" } else { token };
        let digest = Sha256::digest(key.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut v: Vec<f64> = (0..self.dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x * scale
            })
            .collect();
        if let Some(p) = percent {
            let s = p / 100.0;
            let angle = std::f64::consts::PI * s;
            v[0] = 2.0 * s - 1.0;
            v[1] = angle.cos();
            v[2] = angle.sin();
            v[3] = (2.0 * s - 1.0).powi(2);
        }
        v
    }
}

fn parse_percent(token: &str) -> Option<f64> {
    let digits = token.strip_suffix('%')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse::<f64>().ok()
}

impl TextEncoder for HashingTextEncoder {
    fn embed(&self, prompt: &str) -> ConditionEmbedding {
        let mut values = vec![0.0; self.max_tokens * self.dim];
        for (i, token) in prompt.split_whitespace().enumerate() {
            let slot = i.min(self.max_tokens - 1);
            let v = self.token_vector(token);
            let dst = &mut values[slot * self.dim..(slot + 1) * self.dim];
            for (d, x) in dst.iter_mut().zip(v) {
                *d += x;
            }
        }
        ConditionEmbedding::new(values, self.max_tokens, self.dim, prompt.to_string())
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }
}
