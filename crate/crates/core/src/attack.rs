//! The dual-document poisoning optimizer.
//!
//! Two coordinated documents are planted: a *sleeper* that bridges benign
//! topics and the attack domain, and a *trigger* that carries the payload.
//! Each is refined by greedy coordinate search over tokens: one position per
//! iteration, a handful of candidate substitutions, accept only strict loss
//! improvements that stay within the token-change budget and the fluency
//! constraint. The search is black-box — position selection is uniform
//! random because the embedding provider exposes no gradients.
//!
//! Three objectives are implemented:
//! - the sleeper loss (benign-query affinity plus target/trigger terms),
//! - the trigger loss (target-query affinity, sleeper coupling, and a
//!   corpus-diversity penalty),
//! - the joint sparse+dense loss that additionally rewards exact keyword
//!   overlap, used to probe hybrid retrieval.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus, CorpusError, Document, Provenance};
use crate::embedding::{cosine, EmbedError, Embedder, EmbeddingVector};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("candidate vocabulary must be non-empty")]
    EmptyVocab,
    #[error("corpus sample must be non-empty")]
    EmptySample,
    #[error("query has no tokens")]
    EmptyQuery,
    #[error("document has no tokens")]
    EmptyDocument,
    #[error("seed document must contain at least one token")]
    EmptySeed,
    #[error("density must lie in (0,1), got {0}")]
    InvalidDensity(f64),
    #[error("domain-list injection strategy requires a non-empty keyword list")]
    EmptyDomainList,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error("fluency scorer failed: {0}")]
    Fluency(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// One attack instance: the malicious query it targets, the benign queries
/// it must stay dormant for, and the seed texts for both documents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackScenario {
    pub scenario_id: String,
    pub target_query: String,
    pub benign_queries: Vec<String>,
    pub sleeper_seed: String,
    pub trigger_seed: String,
    pub payload_tokens: Vec<String>,
    /// Regex patterns that count as attack success in generated output.
    #[serde(default)]
    pub success_patterns: Vec<String>,
}

impl AttackScenario {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.target_query.trim().is_empty() {
            return Err(AttackError::InvalidScenario("target_query is empty".into()));
        }
        if self.benign_queries.is_empty() {
            return Err(AttackError::InvalidScenario(
                "at least one benign query is required".into(),
            ));
        }
        let trigger_tokens: HashSet<String> = tokenize(&self.trigger_seed).into_iter().collect();
        let missing: Vec<&String> = self
            .payload_tokens
            .iter()
            .filter(|t| !trigger_tokens.contains(*t))
            .collect();
        if !missing.is_empty() {
            return Err(AttackError::InvalidScenario(format!(
                "payload tokens {missing:?} do not appear in the trigger seed"
            )));
        }
        Ok(())
    }

    pub fn sleeper_doc_id(&self) -> String {
        format!("{}::sleeper", self.scenario_id)
    }

    pub fn trigger_doc_id(&self) -> String {
        format!("{}::trigger", self.scenario_id)
    }

    pub fn sleeper_document(&self) -> Document {
        Document::new(
            self.sleeper_doc_id(),
            self.sleeper_seed.clone(),
            Provenance::InjectedSleeper,
        )
    }

    pub fn trigger_document(&self) -> Document {
        Document::new(
            self.trigger_doc_id(),
            self.trigger_seed.clone(),
            Provenance::InjectedTrigger,
        )
    }

    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self, AttackError> {
        let data = std::fs::read_to_string(path)
            .map_err(|e| AttackError::InvalidScenario(e.to_string()))?;
        let scenario: AttackScenario = serde_json::from_str(&data)
            .map_err(|e| AttackError::InvalidScenario(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Objective weights shared by the sleeper and trigger losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            lambda: 0.4,
            beta: 0.3,
            gamma: 0.3,
            epsilon: 0.1,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<(), AttackError> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(AttackError::InvalidConfig(format!(
                    "weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The sleeper loss is printed with `(1 - L_cos)` terms that push the
/// sleeper away from the target query and the trigger; the surrounding
/// narrative instead describes hooks that pull it toward the trigger. Both
/// conventions are available; the literal form is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SleeperSignConvention {
    #[default]
    Literal,
    /// Flips the trigger term so minimizing draws the sleeper toward the
    /// trigger document.
    Narrative,
}

/// Coordinate-search budget and constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub iterations: usize,
    pub candidates_per_iter: usize,
    pub max_token_change_fraction: f64,
    pub early_stop_delta: f64,
    pub early_stop_patience: usize,
    pub fluency_threshold: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            iterations: 100,
            candidates_per_iter: 5,
            max_token_change_fraction: 0.15,
            early_stop_delta: 0.001,
            early_stop_patience: 10,
            fluency_threshold: 100.0,
            seed: 0,
        }
    }
}

impl SearchConfig {
    /// Joint sparse+dense runs default to a shorter budget.
    pub fn joint_default() -> Self {
        SearchConfig {
            iterations: 80,
            ..SearchConfig::default()
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        SearchConfig { seed, ..self }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.max_token_change_fraction <= 0.0 || self.max_token_change_fraction > 1.0 {
            return Err(AttackError::InvalidConfig(format!(
                "max_token_change_fraction must lie in (0,1], got {}",
                self.max_token_change_fraction
            )));
        }
        if self.early_stop_patience == 0 {
            return Err(AttackError::InvalidConfig("patience must be >= 1".into()));
        }
        if self.candidates_per_iter == 0 {
            return Err(AttackError::InvalidConfig(
                "candidates_per_iter must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// `1 - cos(a, b)`: cosine similarity as a minimization objective.
pub fn l_cos(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, AttackError> {
    Ok(1.0 - cosine(a, b)?)
}

fn d_max_vec(vec: &EmbeddingVector, sample: &[EmbeddingVector]) -> Result<f64, AttackError> {
    if sample.is_empty() {
        return Err(AttackError::EmptySample);
    }
    let mut max = f64::NEG_INFINITY;
    for c in sample {
        let cos = cosine(vec, c)?;
        if cos > max {
            max = cos;
        }
    }
    Ok(max)
}

/// Diversity penalty: maximum cosine between the document and the sampled
/// corpus embeddings.
pub fn d_max(
    doc: &Document,
    corpus_sample: &[EmbeddingVector],
    embedder: &dyn Embedder,
) -> Result<f64, AttackError> {
    let vec = embedder.embed(doc.text())?;
    d_max_vec(&vec, corpus_sample)
}

/// Precomputed query embeddings for a scenario, so the optimizer's inner
/// loop embeds only the mutating document.
pub struct ScenarioEmbeddings {
    pub target: EmbeddingVector,
    pub benign: Vec<EmbeddingVector>,
}

impl ScenarioEmbeddings {
    pub fn compute(
        scenario: &AttackScenario,
        embedder: &dyn Embedder,
    ) -> Result<Self, AttackError> {
        let target = embedder.embed(&scenario.target_query)?;
        let texts: Vec<&str> = scenario.benign_queries.iter().map(String::as_str).collect();
        let benign = embedder.embed_batch(&texts)?;
        Ok(ScenarioEmbeddings { target, benign })
    }
}

fn sleeper_loss_vec(
    sleeper_vec: &EmbeddingVector,
    trigger_vec: &EmbeddingVector,
    queries: &ScenarioEmbeddings,
    weights: &ObjectiveWeights,
    convention: SleeperSignConvention,
) -> Result<f64, AttackError> {
    let mut benign_term = 0.0;
    for q in &queries.benign {
        benign_term += l_cos(sleeper_vec, q)?;
    }
    benign_term /= queries.benign.len() as f64;
    let target_term = 1.0 - l_cos(sleeper_vec, &queries.target)?;
    let trigger_term = match convention {
        SleeperSignConvention::Literal => 1.0 - l_cos(sleeper_vec, trigger_vec)?,
        SleeperSignConvention::Narrative => l_cos(sleeper_vec, trigger_vec)?,
    };
    Ok(weights.lambda * benign_term + weights.beta * target_term + weights.gamma * trigger_term)
}

/// Sleeper objective: mean benign-query distance plus the target and trigger
/// terms under the configured sign convention. The mean is the multi-query
/// reduction over the scenario's benign set.
pub fn sleeper_loss(
    sleeper: &Document,
    trigger: &Document,
    scenario: &AttackScenario,
    weights: &ObjectiveWeights,
    embedder: &dyn Embedder,
    convention: SleeperSignConvention,
) -> Result<f64, AttackError> {
    let queries = ScenarioEmbeddings::compute(scenario, embedder)?;
    let s = embedder.embed(sleeper.text())?;
    let t = embedder.embed(trigger.text())?;
    sleeper_loss_vec(&s, &t, &queries, weights, convention)
}

fn trigger_loss_vec(
    trigger_vec: &EmbeddingVector,
    sleeper_vec: &EmbeddingVector,
    target: &EmbeddingVector,
    weights: &ObjectiveWeights,
    corpus_sample: &[EmbeddingVector],
) -> Result<f64, AttackError> {
    let target_term = l_cos(trigger_vec, target)?;
    let sleeper_term = l_cos(trigger_vec, sleeper_vec)?;
    let diversity = d_max_vec(trigger_vec, corpus_sample)?;
    Ok(weights.lambda * target_term + weights.beta * sleeper_term + weights.epsilon * diversity)
}

/// Trigger objective: pulled toward the target query and the sleeper,
/// penalized for hugging existing corpus documents.
pub fn trigger_loss(
    trigger: &Document,
    sleeper: &Document,
    scenario: &AttackScenario,
    weights: &ObjectiveWeights,
    corpus_sample: &[EmbeddingVector],
    embedder: &dyn Embedder,
) -> Result<f64, AttackError> {
    let target = embedder.embed(&scenario.target_query)?;
    let t = embedder.embed(trigger.text())?;
    let s = embedder.embed(sleeper.text())?;
    trigger_loss_vec(&t, &s, &target, weights, corpus_sample)
}

/// Fraction of the query's unique tokens that appear in the document.
pub fn bm25_overlap(doc: &Document, query: &str) -> Result<f64, AttackError> {
    let query_tokens: BTreeSet<String> = tokenize(query).into_iter().collect();
    if query_tokens.is_empty() {
        return Err(AttackError::EmptyQuery);
    }
    let doc_tokens: HashSet<&String> = doc.tokens().iter().collect();
    let present = query_tokens.iter().filter(|t| doc_tokens.contains(*t)).count();
    Ok(present as f64 / query_tokens.len() as f64)
}

/// Joint sparse+dense objective, negated so the coordinate search minimizes
/// it: `-(alpha * cos(e_d, e_q) + (1 - alpha) * overlap(d, q))`.
pub fn joint_loss(
    doc: &Document,
    query: &str,
    alpha: f64,
    embedder: &dyn Embedder,
) -> Result<f64, AttackError> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(AttackError::InvalidConfig(format!(
            "alpha must lie in [0,1], got {alpha}"
        )));
    }
    let d = embedder.embed(doc.text())?;
    let q = embedder.embed(query)?;
    let overlap = bm25_overlap(doc, query)?;
    Ok(-(alpha * cosine(&d, &q)? + (1.0 - alpha) * overlap))
}

/// Fluency constraint interface. Lower perplexity means more fluent text.
pub trait FluencyScorer: Send + Sync {
    fn perplexity(&self, tokens: &[String]) -> Result<f64, AttackError>;
}

/// Corpus bigram model with add-one smoothing: the offline stand-in for a
/// neural perplexity scorer. Its absolute scale depends on the corpus, so
/// thresholds tuned for neural scorers do not transfer; pick thresholds
/// relative to seed-document perplexity.
#[derive(Debug, Clone)]
pub struct BigramModel {
    unigrams: HashMap<String, usize>,
    bigrams: HashMap<(String, String), usize>,
    total_tokens: usize,
    vocab_size: usize,
}

impl BigramModel {
    pub fn fit(corpus: &Corpus) -> Self {
        let mut unigrams: HashMap<String, usize> = HashMap::new();
        let mut bigrams: HashMap<(String, String), usize> = HashMap::new();
        let mut total = 0usize;
        for doc in corpus.documents() {
            let tokens = doc.tokens();
            for token in tokens {
                *unigrams.entry(token.clone()).or_insert(0) += 1;
                total += 1;
            }
            for pair in tokens.windows(2) {
                *bigrams.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += 1;
            }
        }
        // +1 reserves an out-of-vocabulary bucket in the smoothing.
        let vocab_size = unigrams.len() + 1;
        BigramModel {
            unigrams,
            bigrams,
            total_tokens: total,
            vocab_size,
        }
    }

    fn unigram_prob(&self, token: &str) -> f64 {
        let count = self.unigrams.get(token).copied().unwrap_or(0);
        (count as f64 + 1.0) / (self.total_tokens as f64 + self.vocab_size as f64)
    }

    fn bigram_prob(&self, prev: &str, token: &str) -> f64 {
        let pair_count = self
            .bigrams
            .get(&(prev.to_string(), token.to_string()))
            .copied()
            .unwrap_or(0);
        let prev_count = self.unigrams.get(prev).copied().unwrap_or(0);
        (pair_count as f64 + 1.0) / (prev_count as f64 + self.vocab_size as f64)
    }
}

impl FluencyScorer for BigramModel {
    fn perplexity(&self, tokens: &[String]) -> Result<f64, AttackError> {
        if tokens.is_empty() {
            return Err(AttackError::EmptyDocument);
        }
        let mut nll = -self.unigram_prob(&tokens[0]).ln();
        for pair in tokens.windows(2) {
            nll -= self.bigram_prob(&pair[0], &pair[1]).ln();
        }
        Ok((nll / tokens.len() as f64).exp())
    }
}

/// Remote perplexity scorer: POST `{"text": ...}`, response
/// `{"perplexity": ...}`. A scoring failure is treated by the attack step as
/// a constraint violation.
pub struct ExternalFluencyScorer {
    pub endpoint: String,
}

impl FluencyScorer for ExternalFluencyScorer {
    fn perplexity(&self, tokens: &[String]) -> Result<f64, AttackError> {
        if tokens.is_empty() {
            return Err(AttackError::EmptyDocument);
        }
        #[derive(Serialize)]
        struct Req<'a> {
            text: &'a str,
        }
        #[derive(Deserialize)]
        struct Resp {
            perplexity: f64,
        }
        let text = tokens.join(" ");
        let client = reqwest::blocking::Client::new();
        let resp: Resp = client
            .post(&self.endpoint)
            .json(&Req { text: &text })
            .timeout(std::time::Duration::from_secs(30))
            .send()
            .map_err(|e| AttackError::Fluency(e.to_string()))?
            .error_for_status()
            .map_err(|e| AttackError::Fluency(e.to_string()))?
            .json()
            .map_err(|e| AttackError::Fluency(e.to_string()))?;
        Ok(resp.perplexity)
    }
}

/// Where candidate replacement tokens come from.
pub enum CandidateSource {
    Uniform(Vec<String>),
    /// Draw from `preferred` with probability `preferred_prob`, else `base`.
    /// Used by the joint attack to bias selection toward query keywords.
    Biased {
        preferred: Vec<String>,
        base: Vec<String>,
        preferred_prob: f64,
    },
}

impl CandidateSource {
    fn validate(&self) -> Result<(), AttackError> {
        match self {
            CandidateSource::Uniform(v) if v.is_empty() => Err(AttackError::EmptyVocab),
            CandidateSource::Biased { preferred, base, .. }
                if preferred.is_empty() || base.is_empty() =>
            {
                Err(AttackError::EmptyVocab)
            }
            _ => Ok(()),
        }
    }

    fn draw(&self, rng: &mut ChaCha20Rng) -> String {
        match self {
            CandidateSource::Uniform(vocab) => vocab[rng.gen_range(0..vocab.len())].clone(),
            CandidateSource::Biased {
                preferred,
                base,
                preferred_prob,
            } => {
                if rng.gen_bool(*preferred_prob) {
                    preferred[rng.gen_range(0..preferred.len())].clone()
                } else {
                    base[rng.gen_range(0..base.len())].clone()
                }
            }
        }
    }
}

/// One coordinate-search iteration as recorded in the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub position: usize,
    pub best_candidate_loss: f64,
    pub accepted: bool,
    pub loss_after: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchTrace {
    pub seed_loss: f64,
    pub final_loss: f64,
    pub iterations: Vec<IterationRecord>,
    pub accepted_moves: usize,
    pub tokens_changed: usize,
    pub stopped_early: bool,
    /// Set when no move was ever accepted; the document equals its seed.
    pub no_progress: bool,
    pub fluency_rejections: usize,
    pub budget_rejections: usize,
}

/// Greedy coordinate search: per iteration pick one position uniformly at
/// random, draw `candidates_per_iter` replacement tokens, and accept the
/// best candidate only if it strictly lowers the loss, keeps perplexity at
/// or under the threshold, and stays within the token-change budget.
/// Deterministic given the config seed.
pub fn coordinate_search<L>(
    seed_doc: &Document,
    mut loss: L,
    config: &SearchConfig,
    vocab: &CandidateSource,
    fluency: &dyn FluencyScorer,
) -> Result<(Document, SearchTrace), AttackError>
where
    L: FnMut(&[String]) -> Result<f64, AttackError>,
{
    vocab.validate()?;
    if seed_doc.is_empty() {
        return Err(AttackError::EmptySeed);
    }
    let seed_tokens = seed_doc.tokens().to_vec();
    let len = seed_tokens.len();
    let budget = (config.max_token_change_fraction.max(0.0) * len as f64).floor() as usize;

    let mut current = seed_tokens.clone();
    let mut current_loss = loss(&current)?;
    let seed_loss = current_loss;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    let mut trace = SearchTrace {
        seed_loss,
        final_loss: seed_loss,
        iterations: Vec::new(),
        accepted_moves: 0,
        tokens_changed: 0,
        stopped_early: false,
        no_progress: false,
        fluency_rejections: 0,
        budget_rejections: 0,
    };
    let mut stall_streak = 0usize;

    for iteration in 0..config.iterations {
        let position = rng.gen_range(0..len);
        let mut best: Option<(String, f64)> = None;
        for _ in 0..config.candidates_per_iter {
            let token = vocab.draw(&mut rng);
            if token == current[position] {
                continue;
            }
            let previous = std::mem::replace(&mut current[position], token.clone());
            let candidate_loss = loss(&current)?;
            current[position] = previous;
            match &best {
                Some((_, l)) if *l <= candidate_loss => {}
                _ => best = Some((token, candidate_loss)),
            }
        }

        let loss_before = current_loss;
        let mut accepted = false;
        let best_candidate_loss = best.as_ref().map(|(_, l)| *l).unwrap_or(current_loss);
        if let Some((token, candidate_loss)) = best {
            if candidate_loss < current_loss {
                let previous = std::mem::replace(&mut current[position], token);
                let changed = current
                    .iter()
                    .zip(&seed_tokens)
                    .filter(|(a, b)| a != b)
                    .count();
                if changed > budget {
                    trace.budget_rejections += 1;
                    current[position] = previous;
                } else {
                    // Scorer failure counts as a fluency violation.
                    let fluent = matches!(
                        fluency.perplexity(&current),
                        Ok(p) if p <= config.fluency_threshold
                    );
                    if fluent {
                        current_loss = candidate_loss;
                        trace.accepted_moves += 1;
                        trace.tokens_changed = changed;
                        accepted = true;
                    } else {
                        trace.fluency_rejections += 1;
                        current[position] = previous;
                    }
                }
            }
        }

        trace.iterations.push(IterationRecord {
            iteration,
            position,
            best_candidate_loss,
            accepted,
            loss_after: current_loss,
        });

        let improvement = loss_before - current_loss;
        if improvement < config.early_stop_delta {
            stall_streak += 1;
            if stall_streak >= config.early_stop_patience {
                trace.stopped_early = true;
                break;
            }
        } else {
            stall_streak = 0;
        }
    }

    trace.final_loss = current_loss;
    trace.no_progress = trace.accepted_moves == 0;
    let doc = Document::from_tokens(seed_doc.doc_id(), current, seed_doc.provenance());
    Ok((doc, trace))
}

/// Final cosine similarities recorded with an optimized pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalSimilarities {
    pub sleeper_to_target: f64,
    pub sleeper_to_benign_mean: f64,
    pub trigger_to_target: f64,
    pub trigger_to_benign_mean: f64,
    pub sleeper_to_trigger: f64,
}

/// The optimizer's output: both documents plus their search traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizedPair {
    pub scenario_id: String,
    pub sleeper: Document,
    pub trigger: Document,
    pub sleeper_trace: SearchTrace,
    pub trigger_trace: SearchTrace,
    pub finals: FinalSimilarities,
}

impl OptimizedPair {
    pub fn injected_documents(&self) -> [Document; 2] {
        [self.sleeper.clone(), self.trigger.clone()]
    }
}

const DMAX_SAMPLE_CAP: usize = 1000;

fn mix_seed(base: u64, tag: &str) -> u64 {
    let mut h = base ^ 0xcbf29ce484222325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Up-to-1000-document corpus embedding sample for the diversity penalty,
/// drawn without replacement with a seeded RNG when the corpus is larger.
pub fn corpus_sample_embeddings(
    corpus: &Corpus,
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<Vec<EmbeddingVector>, AttackError> {
    if corpus.is_empty() {
        return Err(AttackError::EmptySample);
    }
    let n = corpus.len();
    let indices: Vec<usize> = if n <= DMAX_SAMPLE_CAP {
        (0..n).collect()
    } else {
        let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, "dmax-sample"));
        let mut all: Vec<usize> = (0..n).collect();
        for i in 0..DMAX_SAMPLE_CAP {
            let j = rng.gen_range(i..n);
            all.swap(i, j);
        }
        let mut chosen = all[..DMAX_SAMPLE_CAP].to_vec();
        chosen.sort_unstable();
        chosen
    };
    let texts: Vec<&str> = indices
        .iter()
        .map(|&i| corpus.documents()[i].text())
        .collect();
    Ok(embedder.embed_batch(&texts)?)
}

fn scenario_vocab(corpus: &Corpus, scenario: &AttackScenario) -> Vec<String> {
    let mut vocab: BTreeSet<String> = corpus.vocabulary().into_iter().collect();
    vocab.extend(tokenize(&scenario.target_query));
    for q in &scenario.benign_queries {
        vocab.extend(tokenize(q));
    }
    vocab.into_iter().collect()
}

/// Optimize a sleeper+trigger pair: the trigger is searched first against
/// the seed sleeper, then the sleeper against the optimized trigger — a
/// single deterministic pass.
#[allow(clippy::too_many_arguments)]
pub fn optimize_pair(
    scenario: &AttackScenario,
    weights: &ObjectiveWeights,
    config: &SearchConfig,
    corpus: &Corpus,
    embedder: &dyn Embedder,
    fluency: &dyn FluencyScorer,
    convention: SleeperSignConvention,
) -> Result<OptimizedPair, AttackError> {
    scenario.validate()?;
    weights.validate()?;
    config.validate()?;

    let queries = ScenarioEmbeddings::compute(scenario, embedder)?;
    let sample = corpus_sample_embeddings(corpus, embedder, config.seed)?;
    let vocab = CandidateSource::Uniform(scenario_vocab(corpus, scenario));

    let sleeper_seed_doc = scenario.sleeper_document();
    let trigger_seed_doc = scenario.trigger_document();
    let sleeper_seed_vec = embedder.embed(sleeper_seed_doc.text())?;

    let trigger_config = config.with_seed(mix_seed(config.seed, "trigger"));
    let (trigger, trigger_trace) = coordinate_search(
        &trigger_seed_doc,
        |tokens| {
            let vec = embedder.embed(&tokens.join(" "))?;
            trigger_loss_vec(&vec, &sleeper_seed_vec, &queries.target, weights, &sample)
        },
        &trigger_config,
        &vocab,
        fluency,
    )?;

    let trigger_vec = embedder.embed(trigger.text())?;
    let sleeper_config = config.with_seed(mix_seed(config.seed, "sleeper"));
    let (sleeper, sleeper_trace) = coordinate_search(
        &sleeper_seed_doc,
        |tokens| {
            let vec = embedder.embed(&tokens.join(" "))?;
            sleeper_loss_vec(&vec, &trigger_vec, &queries, weights, convention)
        },
        &sleeper_config,
        &vocab,
        fluency,
    )?;

    let finals = final_similarities(&sleeper, &trigger, &queries, embedder)?;
    Ok(OptimizedPair {
        scenario_id: scenario.scenario_id.clone(),
        sleeper,
        trigger,
        sleeper_trace,
        trigger_trace,
        finals,
    })
}

/// Optimize both documents with the joint sparse+dense objective against
/// the target query, biasing candidate tokens toward the query vocabulary.
#[allow(clippy::too_many_arguments)]
pub fn optimize_pair_joint(
    scenario: &AttackScenario,
    config: &SearchConfig,
    corpus: &Corpus,
    embedder: &dyn Embedder,
    fluency: &dyn FluencyScorer,
    alpha: f64,
    query_bias: f64,
) -> Result<OptimizedPair, AttackError> {
    scenario.validate()?;
    config.validate()?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AttackError::InvalidConfig(format!(
            "alpha must lie in [0,1], got {alpha}"
        )));
    }
    if !(0.0..=1.0).contains(&query_bias) {
        return Err(AttackError::InvalidConfig(format!(
            "query_bias must lie in [0,1], got {query_bias}"
        )));
    }

    let query_tokens: Vec<String> = {
        let set: BTreeSet<String> = tokenize(&scenario.target_query).into_iter().collect();
        set.into_iter().collect()
    };
    if query_tokens.is_empty() {
        return Err(AttackError::EmptyQuery);
    }
    let vocab = CandidateSource::Biased {
        preferred: query_tokens,
        base: scenario_vocab(corpus, scenario),
        preferred_prob: query_bias,
    };
    let queries = ScenarioEmbeddings::compute(scenario, embedder)?;
    let target_query = scenario.target_query.clone();

    let joint = |tokens: &[String]| -> Result<f64, AttackError> {
        let doc = Document::from_tokens("candidate", tokens.to_vec(), Provenance::InjectedOther);
        joint_loss(&doc, &target_query, alpha, embedder)
    };

    let trigger_config = config.with_seed(mix_seed(config.seed, "trigger"));
    let (trigger, trigger_trace) = coordinate_search(
        &scenario.trigger_document(),
        joint,
        &trigger_config,
        &vocab,
        fluency,
    )?;
    let sleeper_config = config.with_seed(mix_seed(config.seed, "sleeper"));
    let (sleeper, sleeper_trace) = coordinate_search(
        &scenario.sleeper_document(),
        joint,
        &sleeper_config,
        &vocab,
        fluency,
    )?;

    let finals = final_similarities(&sleeper, &trigger, &queries, embedder)?;
    Ok(OptimizedPair {
        scenario_id: scenario.scenario_id.clone(),
        sleeper,
        trigger,
        sleeper_trace,
        trigger_trace,
        finals,
    })
}

fn final_similarities(
    sleeper: &Document,
    trigger: &Document,
    queries: &ScenarioEmbeddings,
    embedder: &dyn Embedder,
) -> Result<FinalSimilarities, AttackError> {
    let s = embedder.embed(sleeper.text())?;
    let t = embedder.embed(trigger.text())?;
    let benign_mean = |vec: &EmbeddingVector| -> Result<f64, AttackError> {
        let mut total = 0.0;
        for q in &queries.benign {
            total += cosine(vec, q)?;
        }
        Ok(total / queries.benign.len() as f64)
    };
    Ok(FinalSimilarities {
        sleeper_to_target: cosine(&s, &queries.target)?,
        sleeper_to_benign_mean: benign_mean(&s)?,
        trigger_to_target: cosine(&t, &queries.target)?,
        trigger_to_benign_mean: benign_mean(&t)?,
        sleeper_to_trigger: cosine(&s, &t)?,
    })
}

/// Keyword-injection strategies for the adaptive attack study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum InjectStrategy {
    /// Unique target-query tokens, rarest (highest IDF) first.
    QueryTopK,
    /// Corpus terms ranked by aggregate tf-idf.
    TfidfTop,
    /// A configured list of domain keywords.
    DomainList { keywords: Vec<String> },
    /// Uniform draws from the corpus vocabulary.
    RandomCorpus,
}

/// Insert `ceil(density * len)` tokens chosen by the strategy at uniformly
/// random positions; original tokens keep their relative order.
pub fn keyword_inject(
    doc: &Document,
    strategy: &InjectStrategy,
    density: f64,
    query: &str,
    corpus: &Corpus,
    seed: u64,
) -> Result<Document, AttackError> {
    if density <= 0.0 || density >= 1.0 || !density.is_finite() {
        return Err(AttackError::InvalidDensity(density));
    }
    let count = (density * doc.len() as f64).ceil() as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, "inject"));

    let chosen: Vec<String> = match strategy {
        InjectStrategy::QueryTopK => {
            let unique: BTreeSet<String> = tokenize(query).into_iter().collect();
            if unique.is_empty() {
                return Err(AttackError::EmptyQuery);
            }
            let mut ranked: Vec<String> = unique.into_iter().collect();
            ranked.sort_by(|a, b| {
                let ia = corpus.idf(a).unwrap_or(0.0);
                let ib = corpus.idf(b).unwrap_or(0.0);
                ib.total_cmp(&ia).then_with(|| a.cmp(b))
            });
            (0..count).map(|i| ranked[i % ranked.len()].clone()).collect()
        }
        InjectStrategy::TfidfTop => {
            let mut totals: HashMap<&str, usize> = HashMap::new();
            for d in corpus.documents() {
                for token in d.tokens() {
                    *totals.entry(token.as_str()).or_insert(0) += 1;
                }
            }
            let mut ranked: Vec<(String, f64)> = totals
                .into_iter()
                .map(|(t, c)| {
                    let idf = corpus.idf(t).unwrap_or(0.0);
                    (t.to_string(), c as f64 * idf)
                })
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            ranked.truncate(25);
            if ranked.is_empty() {
                return Err(AttackError::EmptyVocab);
            }
            (0..count).map(|i| ranked[i % ranked.len()].0.clone()).collect()
        }
        InjectStrategy::DomainList { keywords } => {
            if keywords.is_empty() {
                return Err(AttackError::EmptyDomainList);
            }
            (0..count)
                .map(|_| keywords[rng.gen_range(0..keywords.len())].clone())
                .collect()
        }
        InjectStrategy::RandomCorpus => {
            let vocab = corpus.vocabulary();
            if vocab.is_empty() {
                return Err(AttackError::EmptyVocab);
            }
            (0..count)
                .map(|_| vocab[rng.gen_range(0..vocab.len())].clone())
                .collect()
        }
    };

    let mut tokens = doc.tokens().to_vec();
    for token in chosen {
        let pos = rng.gen_range(0..=tokens.len());
        tokens.insert(pos, token);
    }
    Ok(Document::from_tokens(doc.doc_id(), tokens, doc.provenance()))
}

/// Surrogate or external perplexity of a document.
pub fn fluency_score(doc: &Document, scorer: &dyn FluencyScorer) -> Result<f64, AttackError> {
    scorer.perplexity(doc.tokens())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::SyntheticEmbedder;

    fn unit(values: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector::unit(values).unwrap()
    }

    fn test_scenario() -> AttackScenario {
        AttackScenario {
            scenario_id: "test".into(),
            target_query: "bypass enterprise authentication controls".into(),
            benign_queries: vec![
                "password reset procedure".into(),
                "account lockout policy".into(),
            ],
            sleeper_seed: "enterprise systems implement access management and recovery \
                           procedures for administrators during maintenance windows"
                .into(),
            trigger_seed: "to bypass enterprise authentication set authentication required \
                           false in the middleware configuration file"
                .into(),
            payload_tokens: vec![
                "authentication".into(),
                "required".into(),
                "false".into(),
            ],
            success_patterns: vec![],
        }
    }

    struct NoLimit;
    impl FluencyScorer for NoLimit {
        fn perplexity(&self, _tokens: &[String]) -> Result<f64, AttackError> {
            Ok(0.0)
        }
    }

    #[test]
    fn l_cos_extremes() {
        let a = unit(vec![1.0, 0.0]);
        let b = unit(vec![0.0, 1.0]);
        let neg = unit(vec![-1.0, 0.0]);
        assert_eq!(l_cos(&a, &a).unwrap(), 0.0);
        assert_eq!(l_cos(&a, &b).unwrap(), 1.0);
        assert_eq!(l_cos(&a, &neg).unwrap(), 2.0);
    }

    #[test]
    fn d_max_with_self_in_sample_is_one() {
        let v = unit(vec![0.6, 0.8]);
        let sample = vec![unit(vec![0.0, 1.0]), v.clone()];
        assert!((d_max_vec(&v, &sample).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn d_max_orthogonal_sample_is_zero() {
        let v = unit(vec![1.0, 0.0, 0.0]);
        let sample = vec![unit(vec![0.0, 1.0, 0.0]), unit(vec![0.0, 0.0, 1.0])];
        assert_eq!(d_max_vec(&v, &sample).unwrap(), 0.0);
    }

    #[test]
    fn d_max_matches_naive_loop_over_500_vectors() {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let dim = 24;
        let v = unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let sample: Vec<EmbeddingVector> = (0..500)
            .map(|_| unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let got = d_max_vec(&v, &sample).unwrap();
        let mut naive = f64::NEG_INFINITY;
        for c in &sample {
            let mut dot = 0.0;
            for i in 0..dim {
                dot += v.values()[i] * c.values()[i];
            }
            naive = naive.max(dot);
        }
        assert!((got - naive).abs() < 1e-12);
    }

    #[test]
    fn d_max_empty_sample_errors() {
        let v = unit(vec![1.0, 0.0]);
        assert!(matches!(d_max_vec(&v, &[]), Err(AttackError::EmptySample)));
    }

    #[test]
    fn sleeper_loss_vanishing_case() {
        // Sleeper identical to both benign queries, orthogonal to target and
        // trigger: every term evaluates to zero under the printed formula.
        let s = unit(vec![1.0, 0.0, 0.0]);
        let queries = ScenarioEmbeddings {
            target: unit(vec![0.0, 1.0, 0.0]),
            benign: vec![s.clone(), s.clone()],
        };
        let trigger = unit(vec![0.0, 0.0, 1.0]);
        let loss = sleeper_loss_vec(
            &s,
            &trigger,
            &queries,
            &ObjectiveWeights::default(),
            SleeperSignConvention::Literal,
        )
        .unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn sleeper_loss_orthogonal_to_everything_is_lambda() {
        let s = unit(vec![1.0, 0.0, 0.0, 0.0]);
        let queries = ScenarioEmbeddings {
            target: unit(vec![0.0, 0.0, 1.0, 0.0]),
            benign: vec![unit(vec![0.0, 1.0, 0.0, 0.0])],
        };
        let trigger = unit(vec![0.0, 0.0, 0.0, 1.0]);
        let loss = sleeper_loss_vec(
            &s,
            &trigger,
            &queries,
            &ObjectiveWeights::default(),
            SleeperSignConvention::Literal,
        )
        .unwrap();
        assert!((loss - 0.4).abs() < 1e-12);
    }

    #[test]
    fn trigger_loss_vanishing_and_orthogonal_cases() {
        let weights = ObjectiveWeights::default();
        // Identical to target and sleeper, orthogonal sample: zero.
        let t = unit(vec![1.0, 0.0, 0.0]);
        let sample = vec![unit(vec![0.0, 1.0, 0.0])];
        let zero = trigger_loss_vec(&t, &t, &t, &weights, &sample).unwrap();
        assert!(zero.abs() < 1e-12);
        // Orthogonal to target and sleeper, sample containing t itself:
        // 0.4 + 0.3 + 0.1 = 0.8.
        let target = unit(vec![0.0, 1.0, 0.0]);
        let sleeper = unit(vec![0.0, 0.0, 1.0]);
        let sample = vec![t.clone()];
        let loss = trigger_loss_vec(&t, &sleeper, &target, &weights, &sample).unwrap();
        assert!((loss - 0.8).abs() < 1e-12);
    }

    #[test]
    fn bm25_overlap_cases() {
        let full = Document::new("d", "alpha beta gamma delta", Provenance::InjectedOther);
        assert_eq!(bm25_overlap(&full, "alpha beta").unwrap(), 1.0);
        let none = Document::new("d", "epsilon zeta", Provenance::InjectedOther);
        assert_eq!(bm25_overlap(&none, "alpha beta").unwrap(), 0.0);
        let three_of_four = Document::new("d", "alpha beta gamma", Provenance::InjectedOther);
        assert_eq!(
            bm25_overlap(&three_of_four, "alpha beta gamma omega").unwrap(),
            0.75
        );
        assert!(matches!(
            bm25_overlap(&full, "!!!"),
            Err(AttackError::EmptyQuery)
        ));
    }

    #[test]
    fn joint_loss_full_overlap_identical_text_is_minus_one() {
        let embedder = SyntheticEmbedder::new(64, 1);
        let doc = Document::new("d", "secret exfiltration channel", Provenance::InjectedOther);
        for alpha in [0.0, 0.3, 1.0] {
            let loss = joint_loss(&doc, "secret exfiltration channel", alpha, &embedder).unwrap();
            assert!((loss + 1.0).abs() < 1e-9, "alpha={alpha}, loss={loss}");
        }
    }

    #[test]
    fn joint_loss_alpha_one_is_negative_cosine() {
        let embedder = SyntheticEmbedder::new(64, 2);
        let doc = Document::new("d", "one sentence here", Provenance::InjectedOther);
        let q = "different query words";
        let loss = joint_loss(&doc, q, 1.0, &embedder).unwrap();
        let cos = cosine(
            &embedder.embed(doc.text()).unwrap(),
            &embedder.embed(q).unwrap(),
        )
        .unwrap();
        assert!((loss + cos).abs() < 1e-12);
    }

    #[test]
    fn coordinate_search_constant_loss_stops_early_and_returns_seed() {
        let seed = Document::new("s", "one two three four five six", Provenance::InjectedSleeper);
        let config = SearchConfig {
            iterations: 100,
            early_stop_patience: 10,
            seed: 7,
            ..SearchConfig::default()
        };
        let vocab = CandidateSource::Uniform(vec!["alpha".into(), "beta".into()]);
        let (out, trace) =
            coordinate_search(&seed, |_| Ok(1.0), &config, &vocab, &NoLimit).unwrap();
        assert_eq!(out.tokens(), seed.tokens());
        assert!(trace.stopped_early);
        assert_eq!(trace.iterations.len(), 10);
        assert!(trace.no_progress);
    }

    #[test]
    fn coordinate_search_reaches_lower_loss_with_target_tokens_in_vocab() {
        let embedder = SyntheticEmbedder::new(128, 1);
        let target = embedder.embed("midnight garden of forking paths").unwrap();
        let seed = Document::new(
            "s",
            "completely unrelated words about machinery and pipelines today",
            Provenance::InjectedTrigger,
        );
        let vocab = CandidateSource::Uniform(vec![
            "midnight".into(),
            "garden".into(),
            "forking".into(),
            "paths".into(),
            "machinery".into(),
        ]);
        let config = SearchConfig {
            iterations: 60,
            candidates_per_iter: 5,
            max_token_change_fraction: 0.5,
            fluency_threshold: f64::INFINITY,
            seed: 3,
            ..SearchConfig::default()
        };
        let (out, trace) = coordinate_search(
            &seed,
            |tokens| {
                let v = embedder.embed(&tokens.join(" "))?;
                l_cos(&v, &target)
            },
            &config,
            &vocab,
            &NoLimit,
        )
        .unwrap();
        assert!(
            trace.final_loss < trace.seed_loss,
            "final {} vs seed {}",
            trace.final_loss,
            trace.seed_loss
        );
        assert_ne!(out.tokens(), seed.tokens());
    }

    #[test]
    fn coordinate_search_zero_budget_returns_seed() {
        let seed = Document::new("s", "alpha beta gamma", Provenance::InjectedSleeper);
        let config = SearchConfig {
            max_token_change_fraction: 0.0,
            iterations: 20,
            seed: 1,
            fluency_threshold: f64::INFINITY,
            ..SearchConfig::default()
        };
        let vocab = CandidateSource::Uniform(vec!["delta".into()]);
        let mut calls = 0usize;
        let (out, trace) = coordinate_search(
            &seed,
            |tokens| {
                calls += 1;
                // Any substitution lowers this loss, so only the budget gate
                // can stop the search from moving.
                Ok(tokens.iter().filter(|t| *t != "delta").count() as f64)
            },
            &config,
            &vocab,
            &NoLimit,
        )
        .unwrap();
        assert_eq!(out.tokens(), seed.tokens());
        assert!(trace.budget_rejections > 0);
        assert!(calls > 0);
    }

    #[test]
    fn coordinate_search_fluency_blocks_all_moves_sets_no_progress() {
        struct Unfluent;
        impl FluencyScorer for Unfluent {
            fn perplexity(&self, _tokens: &[String]) -> Result<f64, AttackError> {
                Ok(1e12)
            }
        }
        let seed = Document::new("s", "alpha beta gamma delta", Provenance::InjectedTrigger);
        let config = SearchConfig {
            iterations: 30,
            fluency_threshold: 100.0,
            seed: 5,
            max_token_change_fraction: 0.5,
            ..SearchConfig::default()
        };
        let vocab = CandidateSource::Uniform(vec!["epsilon".into(), "zeta".into()]);
        let (out, trace) = coordinate_search(
            &seed,
            |tokens| Ok(tokens.iter().filter(|t| *t != "epsilon").count() as f64),
            &config,
            &vocab,
            &Unfluent,
        )
        .unwrap();
        assert_eq!(out.tokens(), seed.tokens());
        assert!(trace.no_progress);
        assert!(trace.fluency_rejections > 0);
    }

    #[test]
    fn optimize_pair_fixed_point_when_no_substitution_differs() {
        // Vocabulary collapses to the token already present at every
        // position, so no strictly improving move can exist.
        let corpus = Corpus::from_documents([Document::new(
            "c0",
            "filler filler filler",
            Provenance::Corpus,
        )])
        .unwrap();
        let scenario = AttackScenario {
            scenario_id: "fp".into(),
            target_query: "filler".into(),
            benign_queries: vec!["filler".into()],
            sleeper_seed: "filler filler filler filler".into(),
            trigger_seed: "filler filler filler filler".into(),
            payload_tokens: vec!["filler".into()],
            success_patterns: vec![],
        };
        let embedder = SyntheticEmbedder::new(32, 1);
        let config = SearchConfig {
            iterations: 20,
            seed: 2,
            fluency_threshold: f64::INFINITY,
            ..SearchConfig::default()
        };
        let pair = optimize_pair(
            &scenario,
            &ObjectiveWeights::default(),
            &config,
            &corpus,
            &embedder,
            &NoLimit,
            SleeperSignConvention::Literal,
        )
        .unwrap();
        assert_eq!(pair.sleeper.text(), scenario.sleeper_seed);
        assert_eq!(pair.trigger.text(), scenario.trigger_seed);
    }

    #[test]
    fn optimize_pair_improves_trigger_similarity_to_target() {
        let corpus = Corpus::from_documents((0..30).map(|i| {
            Document::new(
                format!("c{i}"),
                format!("household note {i} about gardening schedules and seasonal chores"),
                Provenance::Corpus,
            )
        }))
        .unwrap();
        let scenario = test_scenario();
        let embedder = SyntheticEmbedder::new(128, 1);
        let config = SearchConfig {
            iterations: 60,
            seed: 1,
            fluency_threshold: f64::INFINITY,
            ..SearchConfig::default()
        };
        let pair = optimize_pair(
            &scenario,
            &ObjectiveWeights::default(),
            &config,
            &corpus,
            &embedder,
            &NoLimit,
            SleeperSignConvention::Literal,
        )
        .unwrap();
        let seed_cos = cosine(
            &embedder.embed(&scenario.trigger_seed).unwrap(),
            &embedder.embed(&scenario.target_query).unwrap(),
        )
        .unwrap();
        assert!(
            pair.finals.trigger_to_target > seed_cos,
            "optimized {} vs seed {}",
            pair.finals.trigger_to_target,
            seed_cos
        );
    }

    #[test]
    fn budget_invariant_holds_across_rng_seeds() {
        let corpus = Corpus::from_documents((0..20).map(|i| {
            Document::new(format!("c{i}"), format!("corpus text number {i}"), Provenance::Corpus)
        }))
        .unwrap();
        let scenario = test_scenario();
        let embedder = SyntheticEmbedder::new(64, 1);
        for seed in [1u64, 99u64] {
            let config = SearchConfig {
                iterations: 40,
                seed,
                fluency_threshold: f64::INFINITY,
                ..SearchConfig::default()
            };
            let pair = optimize_pair(
                &scenario,
                &ObjectiveWeights::default(),
                &config,
                &corpus,
                &embedder,
                &NoLimit,
                SleeperSignConvention::Literal,
            )
            .unwrap();
            for (doc, seed_text) in [
                (&pair.sleeper, &scenario.sleeper_seed),
                (&pair.trigger, &scenario.trigger_seed),
            ] {
                let seed_tokens = tokenize(seed_text);
                let changed = doc
                    .tokens()
                    .iter()
                    .zip(&seed_tokens)
                    .filter(|(a, b)| a != b)
                    .count();
                let budget = (0.15 * seed_tokens.len() as f64).floor() as usize;
                assert!(changed <= budget, "changed {changed} > budget {budget}");
            }
        }
    }

    #[test]
    fn keyword_inject_count_rule() {
        let tokens: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
        let doc = Document::from_tokens("d", tokens, Provenance::InjectedTrigger);
        let corpus =
            Corpus::from_documents([Document::new("c", "a b c", Provenance::Corpus)]).unwrap();
        let out =
            keyword_inject(&doc, &InjectStrategy::QueryTopK, 0.10, "alpha beta", &corpus, 1)
                .unwrap();
        assert_eq!(out.len(), 330);
    }

    #[test]
    fn keyword_inject_query_topk_draws_only_query_tokens() {
        let doc = Document::new("d", "one two three four five", Provenance::InjectedTrigger);
        let corpus =
            Corpus::from_documents([Document::new("c", "noise words", Provenance::Corpus)])
                .unwrap();
        let out =
            keyword_inject(&doc, &InjectStrategy::QueryTopK, 0.5, "alpha beta", &corpus, 3)
                .unwrap();
        let query_tokens: HashSet<&str> = ["alpha", "beta"].into();
        let original: HashSet<&str> = ["one", "two", "three", "four", "five"].into();
        for token in out.tokens() {
            assert!(query_tokens.contains(token.as_str()) || original.contains(token.as_str()));
        }
        let inserted = out.len() - doc.len();
        assert_eq!(inserted, 3);
    }

    #[test]
    fn keyword_inject_preserves_original_order() {
        let doc = Document::new("d", "one two three four", Provenance::InjectedTrigger);
        let corpus =
            Corpus::from_documents([Document::new("c", "x y", Provenance::Corpus)]).unwrap();
        let out =
            keyword_inject(&doc, &InjectStrategy::RandomCorpus, 0.5, "q", &corpus, 9).unwrap();
        let originals: Vec<&String> = out
            .tokens()
            .iter()
            .filter(|t| ["one", "two", "three", "four"].contains(&t.as_str()))
            .collect();
        assert_eq!(
            originals,
            ["one", "two", "three", "four"].iter().collect::<Vec<_>>()
        );
    }

    #[test]
    fn keyword_inject_raises_bm25_overlap() {
        let doc = Document::new("d", "plain words only here", Provenance::InjectedTrigger);
        let corpus =
            Corpus::from_documents([Document::new("c", "x", Provenance::Corpus)]).unwrap();
        let q = "alpha beta gamma";
        let before = bm25_overlap(&doc, q).unwrap();
        let out = keyword_inject(&doc, &InjectStrategy::QueryTopK, 0.9, q, &corpus, 2).unwrap();
        let after = bm25_overlap(&out, q).unwrap();
        assert!(after >= before);
        assert_eq!(after, 1.0);
    }

    #[test]
    fn keyword_inject_empty_domain_list_errors() {
        let doc = Document::new("d", "one two", Provenance::InjectedTrigger);
        let corpus =
            Corpus::from_documents([Document::new("c", "x", Provenance::Corpus)]).unwrap();
        let err = keyword_inject(
            &doc,
            &InjectStrategy::DomainList { keywords: vec![] },
            0.5,
            "q",
            &corpus,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, AttackError::EmptyDomainList));
    }

    fn toy_bigram_corpus() -> Corpus {
        Corpus::from_documents([
            Document::new("s1", "the cat sat on the mat", Provenance::Corpus),
            Document::new("s2", "the dog sat on the rug", Provenance::Corpus),
            Document::new("s3", "a bird flew over the mat", Provenance::Corpus),
        ])
        .unwrap()
    }

    #[test]
    fn fluency_training_text_not_worse_than_shuffled() {
        let corpus = toy_bigram_corpus();
        let model = BigramModel::fit(&corpus);
        let in_order = tokenize("the cat sat on the mat");
        let shuffled = tokenize("mat the on cat the sat");
        let p_in = model.perplexity(&in_order).unwrap();
        let p_shuf = model.perplexity(&shuffled).unwrap();
        assert!(p_in <= p_shuf, "in-order {p_in} vs shuffled {p_shuf}");
    }

    #[test]
    fn fluency_single_token_is_exponentiated_unigram_surprise() {
        let corpus = toy_bigram_corpus();
        let model = BigramModel::fit(&corpus);
        // Hand computation on the toy corpus: "the" occurs 5 times among 18
        // tokens; 11 distinct tokens plus the OOV bucket gives V = 12.
        let total = 18.0f64;
        let vocab = 12.0f64;
        let p = (5.0 + 1.0) / (total + vocab);
        let expect = (-(p.ln())).exp();
        let got = model.perplexity(&tokenize("the")).unwrap();
        assert!((got - expect).abs() < 1e-9, "got {got}, expect {expect}");
    }

    #[test]
    fn fluency_out_of_vocabulary_soup_scores_above_in_corpus_sentences() {
        let corpus = toy_bigram_corpus();
        let model = BigramModel::fit(&corpus);
        let soup = tokenize("zugzwang quixotic vermilion abstruse");
        let p_soup = model.perplexity(&soup).unwrap();
        for doc in corpus.documents() {
            let p = model.perplexity(doc.tokens()).unwrap();
            assert!(p_soup > p, "soup {p_soup} vs {} {p}", doc.doc_id());
        }
    }

    #[test]
    fn fluency_empty_document_errors() {
        let model = BigramModel::fit(&toy_bigram_corpus());
        assert!(matches!(
            model.perplexity(&[]),
            Err(AttackError::EmptyDocument)
        ));
    }

    #[test]
    fn scenario_validation_catches_missing_payload_tokens() {
        let mut scenario = test_scenario();
        scenario.payload_tokens.push("absentwordxyz".into());
        assert!(matches!(
            scenario.validate(),
            Err(AttackError::InvalidScenario(_))
        ));
    }
}
