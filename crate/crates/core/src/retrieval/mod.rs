//! Knowledge tools for the planning and supervision agents.
//!
//! `search_docs` runs BM25 and cosine search over a small local corpus,
//! fuses the two candidate lists with reciprocal-rank fusion and hands the
//! head of the fused list to a reranker. `web_search` is a provider boundary
//! with a fixture-backed stub.

mod bm25;
mod embed;
mod fusion;
mod web;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::ToolSet;
use crate::prompts::{DOCS_TOOL, SEARCH_TOOL};

pub use bm25::Bm25Index;
pub use embed::{Embedder, EmbeddingIndex, HashingEmbedder};
pub use fusion::{rrf_fuse, IdentityReranker, Reranker};
pub use web::{HttpWebSearch, StubWebSearch, WebSearch, SEARCH_UNAVAILABLE};

const SHIPPED_CORPUS: &str = include_str!("../../assets/corpus/fl_papers.jsonl");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DocSource {
    #[serde(rename = "arxiv-abstract")]
    ArxivAbstract,
    #[serde(rename = "note")]
    Note,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub source: DocSource,
    /// Tokens in title and body together.
    pub token_count: usize,
}

#[derive(Deserialize)]
struct CorpusRecord {
    doc_id: String,
    #[serde(default)]
    title: String,
    body: String,
    #[serde(default = "default_source")]
    source: DocSource,
}

fn default_source() -> DocSource {
    DocSource::Note
}

impl CorpusDoc {
    pub fn new(doc_id: impl Into<String>, title: impl Into<String>, body: impl Into<String>, source: DocSource) -> Self {
        let title = title.into();
        let body = body.into();
        let token_count = tokenize(&title).len() + tokenize(&body).len();
        Self { doc_id: doc_id.into(), title, body, source, token_count }
    }

    pub fn indexed_text(&self) -> String {
        if self.title.is_empty() {
            self.body.clone()
        } else {
            format!("{}\n{}", self.title, self.body)
        }
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Bm25,
    Vector,
    Fused,
    Reranked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub doc_id: String,
    pub score: f64,
    pub stage: Stage,
    pub rank: usize,
}

/// Sort by score descending then doc_id ascending, truncate, assign ranks 1..n.
pub(crate) fn rank_hits(mut scored: Vec<(String, f64)>, k: usize, stage: Stage) -> Vec<RankedHit> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (doc_id, score))| RankedHit { doc_id, score, stage, rank: i + 1 })
        .collect()
}

/// Ranks are 1..n without gaps and scores never increase.
pub fn well_ranked(hits: &[RankedHit]) -> bool {
    hits.iter().enumerate().all(|(i, h)| h.rank == i + 1)
        && hits.windows(2).all(|w| w[0].score >= w[1].score)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("duplicate doc id {0}")]
    DuplicateId(String),
    #[error("document {0} has no indexable text")]
    EmptyBody(String),
    #[error("embedder failure: {0}")]
    Embedder(String),
    #[error("corpus line {line}: {message}")]
    Corpus { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k1: f64,
    pub b: f64,
    pub rrf_k: f64,
    pub k_each: usize,
    pub n_final: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75, rrf_k: 60.0, k_each: 20, n_final: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub doc_count: usize,
    pub avg_doc_len: f64,
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusDoc>, RetrievalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: CorpusRecord = serde_json::from_str(line)
            .map_err(|e| RetrievalError::Corpus { line: i + 1, message: e.to_string() })?;
        if r.body.trim().is_empty() {
            return Err(RetrievalError::EmptyBody(r.doc_id));
        }
        out.push(CorpusDoc::new(r.doc_id, r.title, r.body, r.source));
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusDoc>, RetrievalError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RetrievalError::Corpus { line: 0, message: format!("{}: {e}", path.display()) })?;
    parse_corpus(&text)
}

pub fn shipped_corpus() -> Vec<CorpusDoc> {
    parse_corpus(SHIPPED_CORPUS).expect("bundled corpus is well-formed")
}

/// Lexical and vector indexes over one corpus. Searches take `&self`;
/// ingestion needs `&mut self`.
pub struct Retriever {
    config: RetrievalConfig,
    docs: BTreeMap<String, CorpusDoc>,
    bm25: Bm25Index,
    vectors: EmbeddingIndex,
    embedder: Arc<dyn Embedder>,
    reranker: Arc<dyn Reranker>,
}

impl Retriever {
    pub fn new(config: RetrievalConfig, embedder: Arc<dyn Embedder>, reranker: Arc<dyn Reranker>) -> Self {
        Self {
            bm25: Bm25Index::new(config.k1, config.b),
            vectors: EmbeddingIndex::new(embedder.dimension()),
            config,
            docs: BTreeMap::new(),
            embedder,
            reranker,
        }
    }

    /// Hashing embedder, identity reranker, default parameters.
    pub fn with_defaults() -> Self {
        Self::new(RetrievalConfig::default(), Arc::new(HashingEmbedder::default()), Arc::new(IdentityReranker))
    }

    pub fn shipped() -> Self {
        let mut r = Self::with_defaults();
        r.ingest(shipped_corpus()).expect("bundled corpus ingests");
        r
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    pub fn doc(&self, id: &str) -> Option<&CorpusDoc> {
        self.docs.get(id)
    }

    /// Add documents to both indexes. All-or-nothing: on error nothing is added.
    pub fn ingest(&mut self, docs: Vec<CorpusDoc>) -> Result<IndexStats, RetrievalError> {
        let mut seen = BTreeSet::new();
        let mut embedded = Vec::with_capacity(docs.len());
        for d in &docs {
            if self.docs.contains_key(&d.doc_id) || !seen.insert(d.doc_id.clone()) {
                return Err(RetrievalError::DuplicateId(d.doc_id.clone()));
            }
            if d.token_count == 0 {
                return Err(RetrievalError::EmptyBody(d.doc_id.clone()));
            }
            embedded.push(self.embedder.embed(&d.indexed_text())?);
        }
        for (d, v) in docs.into_iter().zip(embedded) {
            self.bm25.add(&d.doc_id, &tokenize(&d.indexed_text()));
            self.vectors.insert(&d.doc_id, v)?;
            self.docs.insert(d.doc_id.clone(), d);
        }
        Ok(self.stats())
    }

    pub fn stats(&self) -> IndexStats {
        IndexStats { doc_count: self.bm25.doc_count(), avg_doc_len: self.bm25.avg_doc_len() }
    }

    pub fn bm25_search(&self, query: &str, k: usize) -> Vec<RankedHit> {
        rank_hits(self.bm25.scores(&tokenize(query)), k, Stage::Bm25)
    }

    pub fn vector_search(&self, query: &str, k: usize) -> Result<Vec<RankedHit>, RetrievalError> {
        let q = self.embedder.embed(query)?;
        Ok(rank_hits(self.vectors.cosine_scores(&q), k, Stage::Vector))
    }

    pub fn hybrid_retrieve(&self, query: &str, k_each: usize, n_final: usize) -> Result<Vec<RankedHit>, RetrievalError> {
        let lexical = self.bm25_search(query, k_each);
        let dense = self.vector_search(query, k_each)?;
        let mut fused = rrf_fuse(&[lexical, dense], self.config.rrf_k);
        fused.truncate(n_final);
        let out = self.reranker.rerank(query, fused, &self.docs);
        debug_assert!(well_ranked(&out));
        Ok(out)
    }

    /// Observation text for the `search_docs` tool.
    pub fn search_docs_observation(&self, query: &str) -> String {
        match self.hybrid_retrieve(query, self.config.k_each, self.config.n_final) {
            Ok(hits) if hits.is_empty() => "no matching documents".into(),
            Ok(hits) => hits
                .iter()
                .filter_map(|h| self.docs.get(&h.doc_id))
                .map(|d| format!("[{}] {}: {}", d.doc_id, d.title, d.body))
                .collect::<Vec<_>>()
                .join("\n"),
            Err(e) => format!("search_docs failed: {e}"),
        }
    }
}

/// The two retrieval tools, named as the agent prompts expect.
pub fn knowledge_tools(retriever: Arc<Retriever>, web: Arc<dyn WebSearch>) -> ToolSet {
    let mut tools: ToolSet = BTreeMap::new();
    tools.insert(
        DOCS_TOOL.to_string(),
        Arc::new(move |input: &BTreeMap<String, String>| {
            retriever.search_docs_observation(input.get("query").map(String::as_str).unwrap_or(""))
        }),
    );
    tools.insert(
        SEARCH_TOOL.to_string(),
        Arc::new(move |input: &BTreeMap<String, String>| {
            let query = input.get("query").map(String::as_str).unwrap_or("");
            let context = input.get("context").map(String::as_str).unwrap_or("");
            web.search(query, context).unwrap_or_else(|_| SEARCH_UNAVAILABLE.to_string())
        }),
    );
    tools
}
