use serde::{Deserialize, Serialize};

use super::LlmError;

/// Dimensionality of the built-in lexical embedder.
pub const LEXICAL_DIM: usize = 512;

/// A unit-normalized embedding. The all-zero vector marks an invalid
/// embedding (empty input); similarity against it is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector { values }
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector { values: vec![0.0; dim] }
    }

    /// Scales to unit L2 norm; a zero vector stays zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_valid(&self) -> bool {
        self.values.iter().any(|v| *v != 0.0)
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    /// Cosine similarity, or `None` when the dimensions differ. Invalid
    /// vectors have similarity 0 with everything.
    pub fn cosine(&self, other: &EmbeddingVector) -> Option<f64> {
        if self.dim() != other.dim() {
            return None;
        }
        if !self.is_valid() || !other.is_valid() {
            return Some(0.0);
        }
        let na = self.dot(self).sqrt();
        let nb = other.dot(other).sqrt();
        Some((self.dot(other) / (na * nb)).clamp(-1.0, 1.0))
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError>;
}

/// Hashed character 3-gram term-frequency vector, L2-normalized.
///
/// Text is lowercased and whitespace-collapsed first. Inputs shorter than
/// three characters contribute themselves as a single gram. Components are
/// non-negative, so cosine similarity always lies in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LexicalEmbedder {
    dim: usize,
}

impl Default for LexicalEmbedder {
    fn default() -> Self {
        LexicalEmbedder { dim: LEXICAL_DIM }
    }
}

impl LexicalEmbedder {
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        LexicalEmbedder { dim }
    }

    pub fn vector(&self, text: &str) -> EmbeddingVector {
        let norm = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let chars: Vec<char> = norm.chars().collect();
        let mut tf = vec![0.0; self.dim];
        if chars.is_empty() {
            return EmbeddingVector::new(tf);
        }
        let mut buf = String::new();
        let grams: Box<dyn Iterator<Item = &[char]>> =
            if chars.len() < 3 { Box::new(std::iter::once(&chars[..])) } else { Box::new(chars.windows(3)) };
        for gram in grams {
            buf.clear();
            buf.extend(gram);
            tf[(fnv1a(buf.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        EmbeddingVector::normalized(tf)
    }
}

impl Embedder for LexicalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        Ok(self.vector(text))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3))
}
