//! Exact dense vector index and sparse BM25 index over a corpus.
//!
//! Dense search is deliberately brute force: at the corpus scales studied
//! here exactness is required both for the attack/defense claims and for
//! oracle testing, and ANN rank jitter at the top-k boundary would confound
//! the co-retrieval metric. Ties are always broken by ascending doc id.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{hex_digest, Corpus, Document};
use crate::embedding::{dot, EmbedError, Embedder, EmbeddingVector};

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("unknown document id {doc_id:?}")]
    UnknownDoc { doc_id: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid BM25 parameters: k1={k1}, b={b}")]
    InvalidParams { k1: f64, b: f64 },
    #[error("document id {id:?} already present in index")]
    DuplicateDoc { id: String },
    #[error("corpus hash mismatch: index built against {expected}, loading against {found}")]
    CorpusHashMismatch { expected: String, found: String },
    #[error("persisted index malformed: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Exact dense index: one unit-norm embedding row per document.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    doc_ids: Vec<String>,
    by_id: HashMap<String, usize>,
    matrix: Vec<f64>,
    dimension: usize,
    embedder_identity: String,
    corpus_hash: String,
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn embedder_identity(&self) -> &str {
        &self.embedder_identity
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.by_id.contains_key(doc_id)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn row_for(&self, doc_id: &str) -> Option<&[f64]> {
        self.by_id.get(doc_id).map(|&i| self.row(i))
    }

    pub fn vector_for(&self, doc_id: &str) -> Option<EmbeddingVector> {
        self.row_for(doc_id)
            .map(|r| EmbeddingVector::unit_or_fallback(r.to_vec()))
    }

    /// Raw cosine of the query against every row, in row order.
    pub fn scores(&self, query: &EmbeddingVector) -> Result<Vec<f64>, IndexError> {
        if query.dimension() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                got: query.dimension(),
            });
        }
        Ok((0..self.len()).map(|i| dot(self.row(i), query.values())).collect())
    }

    /// Copy of this index with `docs` embedded and appended. The snapshot
    /// gets a derived corpus hash so paired indexes stay in sync.
    pub fn with_injected(
        &self,
        docs: &[Document],
        embedder: &dyn Embedder,
    ) -> Result<VectorIndex, IndexError> {
        let mut out = self.clone();
        let texts: Vec<&str> = docs.iter().map(|d| d.text()).collect();
        let vectors = embedder.embed_batch(&texts)?;
        for (doc, vec) in docs.iter().zip(vectors) {
            if out.by_id.contains_key(doc.doc_id()) {
                return Err(IndexError::DuplicateDoc {
                    id: doc.doc_id().to_string(),
                });
            }
            if vec.dimension() != out.dimension {
                return Err(IndexError::DimensionMismatch {
                    expected: out.dimension,
                    got: vec.dimension(),
                });
            }
            out.by_id.insert(doc.doc_id().to_string(), out.doc_ids.len());
            out.doc_ids.push(doc.doc_id().to_string());
            out.matrix.extend_from_slice(vec.values());
        }
        out.corpus_hash = injected_hash(&self.corpus_hash, docs);
        Ok(out)
    }
}

pub(crate) fn injected_hash(base: &str, docs: &[Document]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(base.as_bytes());
    for doc in docs {
        hasher.update(doc.doc_id().as_bytes());
        hasher.update([0u8]);
        hasher.update(doc.text().as_bytes());
        hasher.update([0u8]);
    }
    hex_digest(hasher)
}

/// Embed every corpus document and assemble the dense index.
pub fn build_vector_index(
    corpus: &Corpus,
    embedder: &dyn Embedder,
) -> Result<VectorIndex, IndexError> {
    if corpus.is_empty() {
        return Err(IndexError::EmptyCorpus);
    }
    let texts: Vec<&str> = corpus.documents().iter().map(|d| d.text()).collect();
    let vectors = embedder.embed_batch(&texts)?;
    let dimension = embedder.dimension();
    let mut matrix = Vec::with_capacity(corpus.len() * dimension);
    let mut doc_ids = Vec::with_capacity(corpus.len());
    let mut by_id = HashMap::with_capacity(corpus.len());
    for (doc, vec) in corpus.documents().iter().zip(vectors) {
        if vec.dimension() != dimension {
            return Err(IndexError::DimensionMismatch {
                expected: dimension,
                got: vec.dimension(),
            });
        }
        by_id.insert(doc.doc_id().to_string(), doc_ids.len());
        doc_ids.push(doc.doc_id().to_string());
        matrix.extend_from_slice(vec.values());
    }
    Ok(VectorIndex {
        doc_ids,
        by_id,
        matrix,
        dimension,
        embedder_identity: embedder.identity(),
        corpus_hash: corpus.content_hash(),
    })
}

/// One scored hit: fused or single-channel depending on the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Sort scored docs descending by score, ties by ascending doc id, and keep
/// the top k. Shared by both channels and the fusion layer.
pub fn rank_top_k(mut scored: Vec<ScoredDoc>, k: usize) -> Vec<ScoredDoc> {
    scored.sort_unstable_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    scored.truncate(k);
    scored
}

/// Exact top-k cosine search. Returns `min(k, N)` hits.
pub fn vector_topk(
    index: &VectorIndex,
    query: &EmbeddingVector,
    k: usize,
) -> Result<Vec<ScoredDoc>, IndexError> {
    let scores = index.scores(query)?;
    let scored = index
        .doc_ids
        .iter()
        .zip(scores)
        .map(|(id, score)| ScoredDoc {
            doc_id: id.clone(),
            score,
        })
        .collect();
    Ok(rank_top_k(scored, k))
}

/// Okapi BM25 statistics: document frequencies, per-document term counts,
/// lengths, and the `k1`/`b` parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bm25Index {
    doc_ids: Vec<String>,
    by_id: HashMap<String, usize>,
    doc_frequency: HashMap<String, usize>,
    term_counts: Vec<HashMap<String, usize>>,
    doc_lengths: Vec<usize>,
    avgdl: f64,
    k1: f64,
    b: f64,
    corpus_hash: String,
}

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

impl Bm25Index {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.by_id.contains_key(doc_id)
    }

    pub fn doc_frequency(&self, term: &str) -> usize {
        self.doc_frequency.get(term).copied().unwrap_or(0)
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<usize> {
        self.by_id.get(doc_id).map(|&i| self.doc_lengths[i])
    }

    pub fn term_count(&self, doc_id: &str, term: &str) -> Option<usize> {
        self.by_id
            .get(doc_id)
            .map(|&i| self.term_counts[i].get(term).copied().unwrap_or(0))
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = self.doc_frequency(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn score_at(&self, idx: usize, query_tokens: &[String]) -> f64 {
        let len = self.doc_lengths[idx] as f64;
        let counts = &self.term_counts[idx];
        let norm = self.k1 * (1.0 - self.b + self.b * len / self.avgdl);
        let mut score = 0.0;
        for token in query_tokens {
            let tf = counts.get(token).copied().unwrap_or(0) as f64;
            if tf == 0.0 {
                continue;
            }
            score += self.idf(token) * tf * (self.k1 + 1.0) / (tf + norm);
        }
        score
    }

    /// Raw BM25 of the query against every doc, in index order.
    pub fn scores(&self, query_tokens: &[String]) -> Vec<f64> {
        (0..self.len()).map(|i| self.score_at(i, query_tokens)).collect()
    }

    /// Copy of this index with `docs` folded into the statistics.
    pub fn with_injected(&self, docs: &[Document]) -> Result<Bm25Index, IndexError> {
        let mut out = self.clone();
        let mut total = out.avgdl * out.doc_ids.len() as f64;
        for doc in docs {
            if out.by_id.contains_key(doc.doc_id()) {
                return Err(IndexError::DuplicateDoc {
                    id: doc.doc_id().to_string(),
                });
            }
            let mut counts: HashMap<String, usize> = HashMap::new();
            for token in doc.tokens() {
                *counts.entry(token.clone()).or_insert(0) += 1;
            }
            for term in counts.keys() {
                *out.doc_frequency.entry(term.clone()).or_insert(0) += 1;
            }
            total += doc.tokens().len() as f64;
            out.by_id.insert(doc.doc_id().to_string(), out.doc_ids.len());
            out.doc_ids.push(doc.doc_id().to_string());
            out.doc_lengths.push(doc.tokens().len());
            out.term_counts.push(counts);
        }
        out.avgdl = total / out.doc_ids.len() as f64;
        out.corpus_hash = injected_hash(&self.corpus_hash, docs);
        Ok(out)
    }
}

/// Capture Okapi statistics for the corpus under the given parameters.
pub fn build_bm25_index(corpus: &Corpus, k1: f64, b: f64) -> Result<Bm25Index, IndexError> {
    if corpus.is_empty() {
        return Err(IndexError::EmptyCorpus);
    }
    if k1 <= 0.0 || !(0.0..=1.0).contains(&b) {
        return Err(IndexError::InvalidParams { k1, b });
    }
    let mut doc_ids = Vec::with_capacity(corpus.len());
    let mut by_id = HashMap::with_capacity(corpus.len());
    let mut doc_frequency: HashMap<String, usize> = HashMap::new();
    let mut term_counts = Vec::with_capacity(corpus.len());
    let mut doc_lengths = Vec::with_capacity(corpus.len());
    let mut total = 0usize;
    for doc in corpus.documents() {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for token in doc.tokens() {
            *counts.entry(token.clone()).or_insert(0) += 1;
        }
        for term in counts.keys() {
            *doc_frequency.entry(term.clone()).or_insert(0) += 1;
        }
        total += doc.tokens().len();
        by_id.insert(doc.doc_id().to_string(), doc_ids.len());
        doc_ids.push(doc.doc_id().to_string());
        doc_lengths.push(doc.tokens().len());
        term_counts.push(counts);
    }
    let avgdl = total as f64 / corpus.len() as f64;
    Ok(Bm25Index {
        doc_ids,
        by_id,
        doc_frequency,
        term_counts,
        doc_lengths,
        avgdl,
        k1,
        b,
        corpus_hash: corpus.content_hash(),
    })
}

/// Okapi BM25 score of one document for the query tokens.
pub fn bm25_score(
    index: &Bm25Index,
    query_tokens: &[String],
    doc_id: &str,
) -> Result<f64, IndexError> {
    let idx = *index.by_id.get(doc_id).ok_or_else(|| IndexError::UnknownDoc {
        doc_id: doc_id.to_string(),
    })?;
    Ok(index.score_at(idx, query_tokens))
}

/// Top-k documents by BM25, same tie-break as the dense channel.
pub fn bm25_topk(index: &Bm25Index, query_tokens: &[String], k: usize) -> Vec<ScoredDoc> {
    let scores = index.scores(query_tokens);
    let scored = index
        .doc_ids
        .iter()
        .zip(scores)
        .map(|(id, score)| ScoredDoc {
            doc_id: id.clone(),
            score,
        })
        .collect();
    rank_top_k(scored, k)
}

#[derive(Serialize, Deserialize)]
struct IndexMeta {
    format_version: u32,
    embedder_identity: String,
    dimension: usize,
    doc_count: usize,
    k1: f64,
    b: f64,
    corpus_hash: String,
}

const FORMAT_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";
const DOC_IDS_FILE: &str = "doc_ids.json";
const VECTORS_FILE: &str = "vectors.bin";
const BM25_FILE: &str = "bm25.json";

/// Persist both indexes to a directory: a metadata descriptor, the binary
/// embedding matrix, and the BM25 term statistics.
pub fn save_indexes(
    dir: impl AsRef<Path>,
    vector: &VectorIndex,
    bm25: &Bm25Index,
) -> Result<(), IndexError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    if vector.corpus_hash != bm25.corpus_hash {
        return Err(IndexError::CorpusHashMismatch {
            expected: vector.corpus_hash.clone(),
            found: bm25.corpus_hash.clone(),
        });
    }
    let meta = IndexMeta {
        format_version: FORMAT_VERSION,
        embedder_identity: vector.embedder_identity.clone(),
        dimension: vector.dimension,
        doc_count: vector.len(),
        k1: bm25.k1,
        b: bm25.b,
        corpus_hash: vector.corpus_hash.clone(),
    };
    std::fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;
    std::fs::write(dir.join(DOC_IDS_FILE), serde_json::to_vec(&vector.doc_ids)?)?;
    let mut bin = std::io::BufWriter::new(std::fs::File::create(dir.join(VECTORS_FILE))?);
    for value in &vector.matrix {
        bin.write_all(&value.to_le_bytes())?;
    }
    bin.into_inner().map_err(|e| IndexError::Corrupt(e.to_string()))?;
    std::fs::write(dir.join(BM25_FILE), serde_json::to_vec(bm25)?)?;
    Ok(())
}

/// Load persisted indexes. When `expected_corpus_hash` is given, loading
/// fails if the stored snapshot was built against a different corpus.
pub fn load_indexes(
    dir: impl AsRef<Path>,
    expected_corpus_hash: Option<&str>,
) -> Result<(VectorIndex, Bm25Index), IndexError> {
    let dir = dir.as_ref();
    let meta: IndexMeta = serde_json::from_slice(&std::fs::read(dir.join(META_FILE))?)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(IndexError::Corrupt(format!(
            "unsupported format version {}",
            meta.format_version
        )));
    }
    if let Some(expected) = expected_corpus_hash {
        if expected != meta.corpus_hash {
            return Err(IndexError::CorpusHashMismatch {
                expected: meta.corpus_hash,
                found: expected.to_string(),
            });
        }
    }
    let doc_ids: Vec<String> = serde_json::from_slice(&std::fs::read(dir.join(DOC_IDS_FILE))?)?;
    if doc_ids.len() != meta.doc_count {
        return Err(IndexError::Corrupt("doc id count disagrees with metadata".into()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(dir.join(VECTORS_FILE))?.read_to_end(&mut bytes)?;
    let expected_len = meta.doc_count * meta.dimension * 8;
    if bytes.len() != expected_len {
        return Err(IndexError::Corrupt(format!(
            "matrix file has {} bytes, expected {expected_len}",
            bytes.len()
        )));
    }
    let matrix: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let by_id = doc_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i))
        .collect();
    let vector = VectorIndex {
        doc_ids,
        by_id,
        matrix,
        dimension: meta.dimension,
        embedder_identity: meta.embedder_identity,
        corpus_hash: meta.corpus_hash.clone(),
    };
    let bm25: Bm25Index = serde_json::from_slice(&std::fs::read(dir.join(BM25_FILE))?)?;
    if bm25.corpus_hash != meta.corpus_hash {
        return Err(IndexError::CorpusHashMismatch {
            expected: meta.corpus_hash,
            found: bm25.corpus_hash,
        });
    }
    Ok((vector, bm25))
}
