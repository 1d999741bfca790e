//! Pure-vector and hybrid retrieval.
//!
//! Hybrid retrieval fuses the dense and sparse channels after per-query
//! min-max normalization: `score(q,d) = alpha * v̂(q,d) + (1-alpha) * b̂(q,d)`.
//! Without normalization the unbounded BM25 channel dominates at any alpha,
//! which is why normalization is part of the contract surface rather than an
//! implementation detail.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::embedding::{EmbedError, Embedder};
use crate::index::{bm25_topk, vector_topk, Bm25Index, IndexError, VectorIndex};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("score map must be non-empty")]
    EmptyScores,
    #[error("score map contains non-finite values")]
    NonFiniteScores,
    #[error("alpha must lie in [0,1], got {0}")]
    InvalidAlpha(f64),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("pooled candidate policy requires pool size >= 10*k (got pool {pool}, k {k})")]
    PoolTooSmall { pool: usize, k: usize },
    #[error("indexes were built against different corpus snapshots: {vector} vs {bm25}")]
    SnapshotMismatch { vector: String, bm25: String },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// How the candidate set for scoring is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum CandidatePolicy {
    /// Score every document; normalization spans the whole corpus.
    FullCorpus,
    /// Score the union of top-M per channel; normalization spans the pool.
    Pooled { pool_size: usize },
}

impl Default for CandidatePolicy {
    fn default() -> Self {
        CandidatePolicy::FullCorpus
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    PureVector,
    Hybrid,
}

/// Retrieval configuration: fusion weight, depth, candidate policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub mode: RetrievalMode,
    pub alpha: f64,
    pub k: usize,
    #[serde(default)]
    pub candidate_policy: CandidatePolicy,
}

impl RetrievalConfig {
    pub fn pure_vector(k: usize) -> Self {
        RetrievalConfig {
            mode: RetrievalMode::PureVector,
            alpha: 1.0,
            k,
            candidate_policy: CandidatePolicy::FullCorpus,
        }
    }

    pub fn hybrid(alpha: f64, k: usize) -> Self {
        RetrievalConfig {
            mode: RetrievalMode::Hybrid,
            alpha,
            k,
            candidate_policy: CandidatePolicy::FullCorpus,
        }
    }

    /// Pure-vector mode behaves as alpha = 1 regardless of the stored value.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            RetrievalMode::PureVector => 1.0,
            RetrievalMode::Hybrid => self.alpha,
        }
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(RetrievalError::InvalidAlpha(self.alpha));
        }
        if self.k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if let CandidatePolicy::Pooled { pool_size } = self.candidate_policy {
            if pool_size < 10 * self.k {
                return Err(RetrievalError::PoolTooSmall {
                    pool: pool_size,
                    k: self.k,
                });
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.mode {
            RetrievalMode::PureVector => format!("pure_vector(k={})", self.k),
            RetrievalMode::Hybrid => format!("hybrid(alpha={},k={})", self.alpha, self.k),
        }
    }
}

/// One fused hit with both raw channel scores retained for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: String,
    pub fused_score: f64,
    pub raw_vector_score: f64,
    pub raw_bm25_score: f64,
}

/// Ordered retrieval results for one query under one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
    /// Populated when a pooled run was checked against the exact pipeline
    /// and found to differ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl RankedList {
    pub fn contains(&self, doc_id: &str) -> bool {
        self.entries.iter().any(|e| e.doc_id == doc_id)
    }

    /// 1-based rank of a document, if present.
    pub fn rank_of(&self, doc_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.doc_id == doc_id).map(|p| p + 1)
    }

    pub fn doc_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.doc_id.as_str()).collect()
    }
}

/// Per-query min-max normalization into [0,1]. A degenerate channel
/// (max = min) maps everything to the rank-neutral constant 0.5.
pub fn minmax_normalize(
    scores: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>, RetrievalError> {
    if scores.is_empty() {
        return Err(RetrievalError::EmptyScores);
    }
    if scores.values().any(|v| !v.is_finite()) {
        return Err(RetrievalError::NonFiniteScores);
    }
    let min = scores.values().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let out = if max == min {
        scores.keys().map(|k| (k.clone(), 0.5)).collect()
    } else {
        scores
            .iter()
            .map(|(k, &v)| (k.clone(), (v - min) / (max - min)))
            .collect()
    };
    Ok(out)
}

/// Fuse one document's normalized channel scores.
pub fn hybrid_score(alpha: f64, v_norm: f64, b_norm: f64) -> Result<f64, RetrievalError> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(RetrievalError::InvalidAlpha(alpha));
    }
    Ok(alpha * v_norm + (1.0 - alpha) * b_norm)
}

/// The two channel indexes a retrieval run needs, kept together so snapshot
/// consistency can be checked once.
pub struct SearchIndexes<'a> {
    pub vector: &'a VectorIndex,
    pub bm25: &'a Bm25Index,
}

impl<'a> SearchIndexes<'a> {
    pub fn new(vector: &'a VectorIndex, bm25: &'a Bm25Index) -> Self {
        SearchIndexes { vector, bm25 }
    }

    fn check_snapshots(&self) -> Result<(), RetrievalError> {
        if self.vector.corpus_hash() != self.bm25.corpus_hash() {
            return Err(RetrievalError::SnapshotMismatch {
                vector: self.vector.corpus_hash().to_string(),
                bm25: self.bm25.corpus_hash().to_string(),
            });
        }
        Ok(())
    }
}

/// Retrieve the fused top-k for a query.
pub fn retrieve_topk(
    query: &str,
    config: &RetrievalConfig,
    indexes: &SearchIndexes<'_>,
    embedder: &dyn Embedder,
) -> Result<RankedList, RetrievalError> {
    config.validate()?;
    indexes.check_snapshots()?;
    let query_vec = embedder.embed(query)?;
    let query_tokens = tokenize(query);
    let alpha = config.effective_alpha();

    let candidate_ids: Vec<String> = match config.candidate_policy {
        CandidatePolicy::FullCorpus => indexes.vector.doc_ids().to_vec(),
        CandidatePolicy::Pooled { pool_size } => {
            let mut pool: HashSet<String> = HashSet::new();
            for hit in vector_topk(indexes.vector, &query_vec, pool_size)? {
                pool.insert(hit.doc_id);
            }
            for hit in bm25_topk(indexes.bm25, &query_tokens, pool_size) {
                pool.insert(hit.doc_id);
            }
            let mut ids: Vec<String> = pool.into_iter().collect();
            ids.sort_unstable();
            ids
        }
    };

    let vector_scores = indexes.vector.scores(&query_vec)?;
    let bm25_scores = indexes.bm25.scores(&query_tokens);
    let position: std::collections::HashMap<&str, usize> = indexes
        .vector
        .doc_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let mut raw_vector = BTreeMap::new();
    let mut raw_bm25 = BTreeMap::new();
    for id in &candidate_ids {
        let i = position[id.as_str()];
        raw_vector.insert(id.clone(), vector_scores[i]);
        raw_bm25.insert(id.clone(), bm25_scores[i]);
    }
    let v_norm = minmax_normalize(&raw_vector)?;
    let b_norm = minmax_normalize(&raw_bm25)?;

    let mut scored: Vec<RankedEntry> = candidate_ids
        .iter()
        .map(|id| {
            let fused = alpha * v_norm[id] + (1.0 - alpha) * b_norm[id];
            RankedEntry {
                doc_id: id.clone(),
                fused_score: fused,
                raw_vector_score: raw_vector[id],
                raw_bm25_score: raw_bm25[id],
            }
        })
        .collect();
    scored.sort_unstable_by(|a, b| {
        b.fused_score
            .total_cmp(&a.fused_score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    scored.truncate(config.k);
    Ok(RankedList {
        entries: scored,
        note: None,
    })
}

/// Pooled retrieval cross-checked against the exact full-corpus pipeline.
/// When the two disagree, the pooled result is returned with a note
/// explaining the divergence.
pub fn retrieve_topk_checked(
    query: &str,
    config: &RetrievalConfig,
    indexes: &SearchIndexes<'_>,
    embedder: &dyn Embedder,
) -> Result<RankedList, RetrievalError> {
    let mut pooled = retrieve_topk(query, config, indexes, embedder)?;
    if matches!(config.candidate_policy, CandidatePolicy::FullCorpus) {
        return Ok(pooled);
    }
    let exact_config = RetrievalConfig {
        candidate_policy: CandidatePolicy::FullCorpus,
        ..*config
    };
    let exact = retrieve_topk(query, &exact_config, indexes, embedder)?;
    let pooled_ids: Vec<&str> = pooled.doc_ids();
    let exact_ids: Vec<&str> = exact.doc_ids();
    if pooled_ids != exact_ids {
        pooled.note = Some(format!(
            "pooled candidate policy diverged from exact full-corpus scoring: pooled {:?} vs exact {:?}; \
             normalization spans only the scored candidate set, so pooled scores are comparable only within a query",
            pooled_ids, exact_ids
        ));
    }
    Ok(pooled)
}
