//! Retrieval-side detectors and the scoring machinery behind them.
//!
//! Two static detectors (semantic drift from the corpus centroid, keyword
//! rarity) and two behavioral detectors over query logs (query pattern
//! differential, pairwise co-retrieval lift), plus ROC/AUC/F1 sweeps and
//! fixed-FPR operating points for turning raw anomaly scores into
//! deployable alert budgets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, Document};
use crate::embedding::{cosine, EmbedError, EmbeddingVector};

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("query log must be non-empty")]
    EmptyLog,
    #[error("query log needs at least two entries for co-occurrence analysis")]
    LogTooSmall,
    #[error("document has no tokens")]
    EmptyDocument,
    #[error("scores must contain both positive and negative labels")]
    SingleClass,
    #[error("target FPR must lie in (0,1), got {0}")]
    InvalidFpr(f64),
    #[error("no threshold achieves FPR <= {target}; minimum achievable is {achievable}")]
    UnachievableFpr { target: f64, achievable: f64 },
    #[error("malformed log entry at line {line}: {reason}")]
    MalformedLog { line: usize, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Query class for behavioral detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryClass {
    Sensitive,
    Benign,
}

/// One logged retrieval: the query, its class, and the returned doc ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryLogEntry {
    pub query_id: String,
    #[serde(default)]
    pub query: String,
    pub class: QueryClass,
    pub retrieved: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

/// Parse a JSONL query log: `{query_id, class, retrieved: [...]}` per line.
pub fn read_query_log<R: BufRead>(reader: R) -> Result<Vec<QueryLogEntry>, DetectError> {
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: QueryLogEntry =
            serde_json::from_str(&line).map_err(|e| DetectError::MalformedLog {
                line: i + 1,
                reason: e.to_string(),
            })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Semantic drift: `1 - cos(e_doc, centroid)`. Higher is more anomalous.
pub fn semantic_drift(
    doc_embedding: &EmbeddingVector,
    centroid: &EmbeddingVector,
) -> Result<f64, DetectError> {
    Ok(1.0 - cosine(doc_embedding, centroid)?)
}

/// Keyword anomaly: mean smoothed IDF over the document's tokens, counted
/// with repetition. Rare vocabulary scores high.
pub fn keyword_anomaly(doc: &Document, corpus: &Corpus) -> Result<f64, DetectError> {
    if doc.is_empty() {
        return Err(DetectError::EmptyDocument);
    }
    let mut total = 0.0;
    for token in doc.tokens() {
        total += corpus.idf(token)?;
    }
    Ok(total / doc.len() as f64)
}

/// Query pattern differential for one document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpdScore {
    pub value: f64,
    /// The document never appeared in any logged retrieval; the value 0 is
    /// a placeholder rather than evidence of benignity.
    pub never_retrieved: bool,
}

/// Fraction of a document's retrievals that came from sensitive queries:
/// `freq_s / (freq_s + freq_b)`.
pub fn qpd(doc_id: &str, log: &[QueryLogEntry]) -> Result<QpdScore, DetectError> {
    if log.is_empty() {
        return Err(DetectError::EmptyLog);
    }
    let mut sensitive = 0usize;
    let mut benign = 0usize;
    for entry in log {
        if entry.retrieved.iter().any(|d| d == doc_id) {
            match entry.class {
                QueryClass::Sensitive => sensitive += 1,
                QueryClass::Benign => benign += 1,
            }
        }
    }
    if sensitive + benign == 0 {
        return Ok(QpdScore {
            value: 0.0,
            never_retrieved: true,
        });
    }
    Ok(QpdScore {
        value: sensitive as f64 / (sensitive + benign) as f64,
        never_retrieved: false,
    })
}

/// Co-occurrence statistics for one unordered document pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    /// `P(a AND b) / (P(a) * P(b))` over log entries.
    pub lift: f64,
    pub count: usize,
}

/// Pairwise lift over the query log. Pairs that never co-occur are omitted.
pub fn pair_cooccurrence(
    log: &[QueryLogEntry],
) -> Result<BTreeMap<(String, String), PairStats>, DetectError> {
    if log.len() < 2 {
        return Err(DetectError::LogTooSmall);
    }
    let n = log.len() as f64;
    let mut doc_counts: HashMap<&str, usize> = HashMap::new();
    let mut pair_counts: HashMap<(&str, &str), usize> = HashMap::new();
    for entry in log {
        let unique: Vec<&str> = {
            let mut v: Vec<&str> = entry.retrieved.iter().map(String::as_str).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        for doc in &unique {
            *doc_counts.entry(doc).or_insert(0) += 1;
        }
        for i in 0..unique.len() {
            for j in (i + 1)..unique.len() {
                *pair_counts.entry((unique[i], unique[j])).or_insert(0) += 1;
            }
        }
    }
    let mut out = BTreeMap::new();
    for ((a, b), count) in pair_counts {
        let p_ab = count as f64 / n;
        let p_a = doc_counts[a] as f64 / n;
        let p_b = doc_counts[b] as f64 / n;
        out.insert(
            (a.to_string(), b.to_string()),
            PairStats {
                lift: p_ab / (p_a * p_b),
                count,
            },
        );
    }
    Ok(out)
}

/// One point on the ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// Result of a threshold sweep: ROC curve, AUC, and the best F1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocReport {
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    pub best_f1: f64,
    pub best_f1_threshold: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Threshold sweep with the higher-score-is-positive convention: ROC points,
/// trapezoidal AUC, and the best F1 with its threshold.
pub fn roc_f1(
    scores: &BTreeMap<String, f64>,
    positives: &HashSet<String>,
) -> Result<RocReport, DetectError> {
    let total_pos = scores.keys().filter(|k| positives.contains(*k)).count();
    let total_neg = scores.len() - total_pos;
    if total_pos == 0 || total_neg == 0 {
        return Err(DetectError::SingleClass);
    }

    // Descending by score; groups of equal scores advance together so ties
    // contribute diagonal ROC segments.
    let mut ranked: Vec<(&String, f64, bool)> = scores
        .iter()
        .map(|(k, &v)| (k, v, positives.contains(k)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));

    let mut roc = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut best_f1 = 0.0f64;
    let mut best_f1_threshold = f64::INFINITY;
    let mut i = 0;
    while i < ranked.len() {
        let threshold = ranked[i].1;
        // Consume the whole tie group.
        while i < ranked.len() && ranked[i].1 == threshold {
            if ranked[i].2 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push(RocPoint {
            fpr: fp as f64 / total_neg as f64,
            tpr: tp as f64 / total_pos as f64,
        });
        // F1 at "predict positive iff score >= threshold".
        let fn_count = total_pos - tp;
        let denom = 2 * tp + fp + fn_count;
        let f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
        if f1 > best_f1 {
            best_f1 = f1;
            best_f1_threshold = threshold;
        }
    }

    let mut auc = 0.0;
    for pair in roc.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) / 2.0;
    }
    Ok(RocReport {
        roc,
        auc,
        best_f1,
        best_f1_threshold,
        positives: total_pos,
        negatives: total_neg,
    })
}

/// A fixed-FPR operating point with its projected alert volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub target_fpr: f64,
    pub threshold: f64,
    pub achieved_fpr: f64,
    pub recall: f64,
    pub alerts_per_day: f64,
    pub daily_query_volume: u64,
    pub poisoned_fraction: f64,
}

/// Pick the smallest threshold whose FPR stays at or under the target, then
/// project alerts/day under the supplied traffic and base-rate assumptions.
/// The base rates are explicit inputs so the numbers stay auditable.
pub fn operating_point(
    scores: &BTreeMap<String, f64>,
    positives: &HashSet<String>,
    target_fpr: f64,
    daily_query_volume: u64,
    poisoned_fraction: f64,
) -> Result<OperatingPoint, DetectError> {
    if !(0.0..1.0).contains(&target_fpr) || target_fpr <= 0.0 {
        return Err(DetectError::InvalidFpr(target_fpr));
    }
    let total_pos = scores.keys().filter(|k| positives.contains(*k)).count();
    let total_neg = scores.len() - total_pos;
    if total_pos == 0 || total_neg == 0 {
        return Err(DetectError::SingleClass);
    }

    // One descending sweep accumulates (fpr, tpr) at every distinct
    // threshold; scanning that list from the smallest threshold upward finds
    // the most permissive compliant choice, which maximizes recall.
    let mut ranked: Vec<(f64, bool)> = scores
        .iter()
        .map(|(k, &v)| (v, positives.contains(k)))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut sweep: Vec<(f64, f64, f64)> = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < ranked.len() {
        let threshold = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == threshold {
            if ranked[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        sweep.push((
            threshold,
            fp as f64 / total_neg as f64,
            tp as f64 / total_pos as f64,
        ));
    }
    let mut chosen: Option<(f64, f64, f64)> = None;
    let mut min_achievable = f64::INFINITY;
    for &(threshold, fpr, tpr) in sweep.iter().rev() {
        min_achievable = min_achievable.min(fpr);
        if fpr <= target_fpr {
            chosen = Some((threshold, fpr, tpr));
            break;
        }
    }
    let (threshold, achieved_fpr, recall) = chosen.ok_or(DetectError::UnachievableFpr {
        target: target_fpr,
        achievable: min_achievable,
    })?;

    let clean_fraction = 1.0 - poisoned_fraction;
    let alerts_per_day = daily_query_volume as f64
        * (achieved_fpr * clean_fraction + recall * poisoned_fraction);
    Ok(OperatingPoint {
        target_fpr,
        threshold,
        achieved_fpr,
        recall,
        alerts_per_day,
        daily_query_volume,
        poisoned_fraction,
    })
}

/// A complete single-method detection run, serializable for the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub method: String,
    /// Sorted (doc_id, score) pairs.
    pub scores: Vec<(String, f64)>,
    pub poisoned_ids: Vec<String>,
    pub roc: RocReport,
    pub operating_points: Vec<OperatingPoint>,
}

/// Assemble a report from raw scores, labels, and requested FPR targets.
pub fn detection_report(
    method: &str,
    scores: BTreeMap<String, f64>,
    positives: &HashSet<String>,
    fpr_targets: &[(f64, u64, f64)],
) -> Result<DetectionReport, DetectError> {
    let roc = roc_f1(&scores, positives)?;
    let mut operating_points = Vec::new();
    for &(fpr, volume, poisoned_fraction) in fpr_targets {
        operating_points.push(operating_point(
            &scores,
            positives,
            fpr,
            volume,
            poisoned_fraction,
        )?);
    }
    let mut poisoned_ids: Vec<String> = positives.iter().cloned().collect();
    poisoned_ids.sort_unstable();
    Ok(DetectionReport {
        method: method.to_string(),
        scores: scores.into_iter().collect(),
        poisoned_ids,
        roc,
        operating_points,
    })
}
