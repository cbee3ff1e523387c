//! Reciprocal-rank fusion and the rerank stage.

use std::collections::BTreeMap;

use super::{rank_hits, CorpusDoc, RankedHit, Stage};

/// fused(d) = sum over lists containing d of 1 / (k + rank).
pub fn rrf_fuse(lists: &[Vec<RankedHit>], k: f64) -> Vec<RankedHit> {
    let mut acc: BTreeMap<&str, f64> = BTreeMap::new();
    for list in lists {
        for h in list {
            *acc.entry(h.doc_id.as_str()).or_insert(0.0) += 1.0 / (k + h.rank as f64);
        }
    }
    let n = acc.len();
    rank_hits(acc.into_iter().map(|(id, s)| (id.to_string(), s)).collect(), n, Stage::Fused)
}

pub trait Reranker: Send + Sync {
    /// Reorder the fused head; output carries `Stage::Reranked` and ranks 1..n.
    fn rerank(&self, query: &str, hits: Vec<RankedHit>, docs: &BTreeMap<String, CorpusDoc>) -> Vec<RankedHit>;
}

/// Keeps the fused order and scores.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityReranker;

impl Reranker for IdentityReranker {
    fn rerank(&self, _query: &str, hits: Vec<RankedHit>, _docs: &BTreeMap<String, CorpusDoc>) -> Vec<RankedHit> {
        hits.into_iter()
            .enumerate()
            .map(|(i, h)| RankedHit { stage: Stage::Reranked, rank: i + 1, ..h })
            .collect()
    }
}
