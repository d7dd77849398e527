//! Text similarity used for skill selection and redundancy pruning.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::backend::Embedder;

pub trait Similarity: Send + Sync {
    /// Symmetric score in `[0, 1]` for token-based measures, `[-1, 1]` for
    /// cosine.
    fn similarity(&self, a: &str, b: &str) -> f64;
}

/// Lowercased whitespace tokens with surrounding punctuation trimmed.
pub fn token_set(text: &str) -> BTreeSet<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Token-set Jaccard index. Two empty texts are defined to be identical.
#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardSimilarity;

impl Similarity for JaccardSimilarity {
    fn similarity(&self, a: &str, b: &str) -> f64 {
        let a = token_set(a);
        let b = token_set(b);
        if a.is_empty() && b.is_empty() {
            return 1.0;
        }
        let inter = a.intersection(&b).count();
        let union = a.len() + b.len() - inter;
        inter as f64 / union as f64
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Cosine similarity over embeddings from an [`Embedder`]. Embedding failures
/// score 0 so selection degrades to the id tie-break instead of aborting.
pub struct EmbeddingSimilarity {
    embedder: Arc<dyn Embedder>,
}

impl EmbeddingSimilarity {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        Self { embedder }
    }
}

impl Similarity for EmbeddingSimilarity {
    fn similarity(&self, a: &str, b: &str) -> f64 {
        match (self.embedder.embed(a), self.embedder.embed(b)) {
            (Ok(va), Ok(vb)) => cosine(&va, &vb),
            (Err(e), _) | (_, Err(e)) => {
                log::warn!("embedding failed, similarity treated as 0: {e}");
                0.0
            }
        }
    }
}
