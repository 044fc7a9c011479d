//! Deterministic text encoder: each token is hashed to a fixed Gaussian vector.

use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, Stream};
use crate::tensor::Tensor;

pub const TEXT_DIM: usize = 32;
pub const MAX_TOKENS: usize = 24;

/// Token vectors `[L, D]` plus their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Tensor,
    pub pooled: Vec<f64>,
}

impl TextEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// The reserved unconditional embedding: one all-zero token.
    pub fn null(dim: usize) -> Self {
        Self { tokens: Tensor::zeros(&[1, dim]), pooled: vec![0.0; dim] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub seed: u64,
    pub dim: usize,
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .take(MAX_TOKENS)
        .map(str::to_string)
        .collect()
}

impl TextEncoder {
    pub fn new(seed: u64) -> Self {
        Self { seed: derive_seed(seed, "text-encoder"), dim: TEXT_DIM }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut r = Stream::new(derive_seed(self.seed, token));
        r.normal_vec(self.dim).into_iter().map(|v| v * scale).collect()
    }

    /// Encode a prompt. Text with no tokens (including the empty null prompt)
    /// gives the unconditional embedding.
    pub fn encode(&self, text: &str) -> TextEmbedding {
        let toks = tokenize(text);
        if toks.is_empty() {
            return TextEmbedding::null(self.dim);
        }
        let data: Vec<f64> = toks.iter().flat_map(|t| self.token_vector(t)).collect();
        let l = toks.len();
        let mut pooled = vec![0.0; self.dim];
        for row in data.chunks(self.dim) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v / l as f64;
            }
        }
        let tokens = Tensor::new(vec![l, self.dim], data).expect("finite hash embeddings");
        TextEmbedding { tokens, pooled }
    }

    pub fn null(&self) -> TextEmbedding {
        TextEmbedding::null(self.dim)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
