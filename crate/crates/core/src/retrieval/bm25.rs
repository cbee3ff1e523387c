//! Okapi BM25 over an inverted index.
//!
//! score(d, q) = sum over distinct query terms t present in d of
//! idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl)),
//! with the non-negative idf(t) = ln((N - n_t + 0.5) / (n_t + 0.5) + 1).

use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    doc_ids: Vec<String>,
    doc_lens: Vec<usize>,
    total_len: usize,
    postings: BTreeMap<String, Vec<(usize, u32)>>,
}

impl Bm25Index {
    pub fn new(k1: f64, b: f64) -> Self {
        Self { k1, b, doc_ids: Vec::new(), doc_lens: Vec::new(), total_len: 0, postings: BTreeMap::new() }
    }

    pub fn add(&mut self, doc_id: &str, tokens: &[String]) {
        let idx = self.doc_ids.len();
        self.doc_ids.push(doc_id.to_string());
        self.doc_lens.push(tokens.len());
        self.total_len += tokens.len();
        let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
        for t in tokens {
            *tf.entry(t).or_insert(0) += 1;
        }
        for (term, n) in tf {
            self.postings.entry(term.to_string()).or_default().push((idx, n));
        }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        if self.doc_ids.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.doc_ids.len() as f64
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n_docs = self.doc_ids.len() as f64;
        let df = self.postings.get(term).map(Vec::len).unwrap_or(0) as f64;
        ((n_docs - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Scores of every document containing at least one query term.
    pub fn scores(&self, query: &[String]) -> Vec<(String, f64)> {
        let avgdl = self.avg_doc_len();
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        let terms: BTreeSet<&String> = query.iter().collect();
        for term in terms {
            let Some(list) = self.postings.get(term.as_str()) else { continue };
            let idf = self.idf(term);
            for &(doc, tf) in list {
                let tf = tf as f64;
                let norm = 1.0 - self.b + self.b * self.doc_lens[doc] as f64 / avgdl;
                *acc.entry(doc).or_insert(0.0) += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
            }
        }
        acc.into_iter().map(|(doc, s)| (self.doc_ids[doc].clone(), s)).collect()
    }
}
