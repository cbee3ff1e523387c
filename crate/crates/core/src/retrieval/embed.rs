//! Embedding interface, a deterministic hashing embedder and the exhaustive
//! cosine index.

use std::collections::BTreeMap;

use super::{tokenize, RetrievalError};

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError>;
}

/// Signed feature hashing of tokens (FNV-1a), L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

impl Embedder for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let mut v = vec![0.0; self.dim];
        for t in tokenize(text) {
            let h = fnv1a(t.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        normalize(&mut v);
        Ok(v)
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    dimension: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn new(dimension: usize) -> Self {
        Self { dimension, vectors: BTreeMap::new() }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn vectors(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.vectors
    }

    pub fn insert(&mut self, doc_id: &str, v: Vec<f64>) -> Result<(), RetrievalError> {
        if v.len() != self.dimension {
            return Err(RetrievalError::Embedder(format!(
                "vector for {doc_id} has length {}, expected {}",
                v.len(),
                self.dimension
            )));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(RetrievalError::Embedder(format!("vector for {doc_id} has norm {norm}")));
        }
        self.vectors.insert(doc_id.to_string(), v);
        Ok(())
    }

    /// Cosine similarity of `q` against every stored vector.
    pub fn cosine_scores(&self, q: &[f64]) -> Vec<(String, f64)> {
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.vectors
            .iter()
            .map(|(id, v)| {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                (id.clone(), if qn > 0.0 { dot / qn } else { 0.0 })
            })
            .collect()
    }
}
