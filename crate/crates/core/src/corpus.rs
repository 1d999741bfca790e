//! Corpus ingestion, tokenization, and corpus-level statistics.
//!
//! The corpus is the substrate every other module works against: the sparse
//! index reads document frequencies from it, the attack optimizer draws its
//! candidate vocabulary from it, and the detectors compare injected documents
//! against its statistics.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{EmbeddingVector, Embedder, EmbedError};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("duplicate document id {id:?}")]
    DuplicateId { id: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no embedding supplied for document {doc_id:?}")]
    MissingEmbedding { doc_id: String },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Where a document came from. Corpus documents are trusted content;
/// the injected variants are attacker-controlled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Corpus,
    InjectedSleeper,
    InjectedTrigger,
    InjectedOther,
}

impl Provenance {
    pub fn is_injected(self) -> bool {
        !matches!(self, Provenance::Corpus)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Provenance::Corpus => "corpus",
            Provenance::InjectedSleeper => "injected-sleeper",
            Provenance::InjectedTrigger => "injected-trigger",
            Provenance::InjectedOther => "injected-other",
        };
        f.write_str(s)
    }
}

/// A single document. Tokens are always derived from the text via
/// [`tokenize`], and provenance is fixed at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "DocumentRepr", into = "DocumentRepr")]
pub struct Document {
    doc_id: String,
    text: String,
    tokens: Vec<String>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct DocumentRepr {
    doc_id: String,
    text: String,
    provenance: Provenance,
}

impl From<DocumentRepr> for Document {
    fn from(r: DocumentRepr) -> Self {
        Document::new(r.doc_id, r.text, r.provenance)
    }
}

impl From<Document> for DocumentRepr {
    fn from(d: Document) -> Self {
        DocumentRepr {
            doc_id: d.doc_id,
            text: d.text,
            provenance: d.provenance,
        }
    }
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>, provenance: Provenance) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Document {
            doc_id: doc_id.into(),
            text,
            tokens,
            provenance,
        }
    }

    /// Build a document directly from tokens (space-joined text). Used by the
    /// optimizer, whose edits operate on token sequences.
    pub fn from_tokens(
        doc_id: impl Into<String>,
        tokens: Vec<String>,
        provenance: Provenance,
    ) -> Self {
        let text = tokens.join(" ");
        Document {
            doc_id: doc_id.into(),
            text,
            tokens,
            provenance,
        }
    }

    pub fn doc_id(&self) -> &str {
        &self.doc_id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Deterministic tokenizer: lowercase, split on any non-alphanumeric
/// character, drop empty tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Smoothed inverse document frequency: `ln((N + 1) / (df + 1)) + 1`.
///
/// Strictly positive, defined for unseen terms (df = 0), which is exactly the
/// case attack vocabulary hits on a general corpus.
fn idf_value(n: usize, df: usize) -> f64 {
    ((n as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
}

/// An immutable-after-build document collection with running statistics.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    documents: Vec<Document>,
    by_id: HashMap<String, usize>,
    doc_frequency: HashMap<String, usize>,
    total_tokens: usize,
}

impl Corpus {
    pub fn new() -> Self {
        Corpus::default()
    }

    pub fn from_documents<I>(docs: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = Document>,
    {
        let mut corpus = Corpus::new();
        for doc in docs {
            corpus.push(doc)?;
        }
        Ok(corpus)
    }

    /// Insert a document, updating document frequencies and length totals.
    pub fn push(&mut self, doc: Document) -> Result<(), CorpusError> {
        if self.by_id.contains_key(doc.doc_id()) {
            return Err(CorpusError::DuplicateId {
                id: doc.doc_id().to_string(),
            });
        }
        let mut seen: Vec<&String> = doc.tokens.iter().collect();
        seen.sort_unstable();
        seen.dedup();
        for token in seen {
            *self.doc_frequency.entry(token.clone()).or_insert(0) += 1;
        }
        self.total_tokens += doc.tokens.len();
        self.by_id.insert(doc.doc_id().to_string(), self.documents.len());
        self.documents.push(doc);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.by_id.contains_key(doc_id)
    }

    /// Number of documents containing `token` at least once.
    pub fn doc_frequency(&self, token: &str) -> usize {
        self.doc_frequency.get(token).copied().unwrap_or(0)
    }

    pub fn avg_doc_len(&self) -> f64 {
        if self.documents.is_empty() {
            0.0
        } else {
            self.total_tokens as f64 / self.documents.len() as f64
        }
    }

    /// Corpus vocabulary in sorted order, so downstream samplers are
    /// deterministic.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut vocab: Vec<String> = self.doc_frequency.keys().cloned().collect();
        vocab.sort_unstable();
        vocab
    }

    /// Smoothed IDF of a term against this corpus. Errors on an empty corpus.
    pub fn idf(&self, term: &str) -> Result<f64, CorpusError> {
        if self.documents.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        Ok(idf_value(self.documents.len(), self.doc_frequency(term)))
    }

    /// Content hash over (doc_id, text) pairs in insertion order. Identifies
    /// the corpus snapshot indexes were built against.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for doc in &self.documents {
            hasher.update(doc.doc_id().as_bytes());
            hasher.update([0u8]);
            hasher.update(doc.text().as_bytes());
            hasher.update([0u8]);
        }
        hex_digest(hasher)
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    let bytes = hasher.finalize();
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: String,
    text: String,
    #[serde(default)]
    #[allow(dead_code)]
    meta: Option<serde_json::Value>,
}

/// Ingest a line-delimited JSON stream: one `{id, text, meta?}` record per
/// line. Every document gets `Provenance::Corpus`.
pub fn ingest_jsonl<R: BufRead>(reader: R) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        if record.id.is_empty() || record.text.is_empty() {
            return Err(CorpusError::MalformedLine {
                line: line_no,
                reason: "id and text must be non-empty".to_string(),
            });
        }
        corpus.push(Document::new(record.id, record.text, Provenance::Corpus))?;
    }
    Ok(corpus)
}

/// Ingest a JSONL corpus file from disk.
pub fn ingest_jsonl_path(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let file = std::fs::File::open(path)?;
    ingest_jsonl(std::io::BufReader::new(file))
}

/// Unit-normalized component-wise mean of the supplied document embeddings.
pub fn centroid(
    corpus: &Corpus,
    embeddings: &HashMap<String, EmbeddingVector>,
) -> Result<EmbeddingVector, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let first = corpus
        .documents()
        .first()
        .and_then(|d| embeddings.get(d.doc_id()))
        .ok_or_else(|| CorpusError::MissingEmbedding {
            doc_id: corpus.documents()[0].doc_id().to_string(),
        })?;
    let dim = first.dimension();
    let mut acc = vec![0.0f64; dim];
    for doc in corpus.documents() {
        let vec = embeddings
            .get(doc.doc_id())
            .ok_or_else(|| CorpusError::MissingEmbedding {
                doc_id: doc.doc_id().to_string(),
            })?;
        if vec.dimension() != dim {
            return Err(CorpusError::DimensionMismatch {
                expected: dim,
                got: vec.dimension(),
            });
        }
        for (a, v) in acc.iter_mut().zip(vec.values()) {
            *a += v;
        }
    }
    let n = corpus.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    Ok(EmbeddingVector::unit_or_fallback(acc))
}

/// Convenience: embed every document and produce the centroid in one pass.
pub fn centroid_with_embedder(
    corpus: &Corpus,
    embedder: &dyn Embedder,
) -> Result<EmbeddingVector, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let texts: Vec<&str> = corpus.documents().iter().map(|d| d.text()).collect();
    let vectors = embedder.embed_batch(&texts)?;
    let map: HashMap<String, EmbeddingVector> = corpus
        .documents()
        .iter()
        .zip(vectors)
        .map(|(d, v)| (d.doc_id().to_string(), v))
        .collect();
    centroid(corpus, &map)
}
