use serde::{Deserialize, Serialize};

use super::IngestError;

/// Character-window chunking parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingPolicy {
    pub chunk_size: usize,
    pub overlap: usize,
}

impl Default for ChunkingPolicy {
    fn default() -> Self {
        ChunkingPolicy { chunk_size: 3000, overlap: 200 }
    }
}

impl ChunkingPolicy {
    pub fn new(chunk_size: usize, overlap: usize) -> Result<Self, IngestError> {
        let policy = ChunkingPolicy { chunk_size, overlap };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.chunk_size == 0 {
            return Err(IngestError::InvalidPolicy("chunk_size must be > 0".into()));
        }
        if self.overlap >= self.chunk_size {
            return Err(IngestError::InvalidPolicy(format!(
                "overlap {} must be smaller than chunk_size {}",
                self.overlap, self.chunk_size
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.chunk_size - self.overlap
    }
}

/// A window of the source text. Spans are character (not byte) offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextChunk {
    pub index: usize,
    pub span_start: usize,
    pub span_end: usize,
    pub text: String,
}

/// Splits `text` into windows of `chunk_size` characters advancing by the
/// policy stride. The final window always ends at the end of the text.
///
/// Panics if the policy is invalid; construct it through
/// [`ChunkingPolicy::new`] or call `validate` first.
pub fn chunk_text(text: &str, policy: &ChunkingPolicy) -> Vec<TextChunk> {
    assert!(
        policy.chunk_size > 0 && policy.overlap < policy.chunk_size,
        "invalid chunking policy {policy:?}"
    );
    // byte offset of every char boundary, plus the end
    let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len())).collect();
    let len = bounds.len() - 1;
    let mut chunks = Vec::new();
    if len == 0 {
        return chunks;
    }
    let mut start = 0;
    loop {
        let end = (start + policy.chunk_size).min(len);
        chunks.push(TextChunk {
            index: chunks.len(),
            span_start: start,
            span_end: end,
            text: text[bounds[start]..bounds[end]].to_string(),
        });
        if end == len {
            break;
        }
        start += policy.stride();
    }
    chunks
}
