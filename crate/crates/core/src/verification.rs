//! Multi-model consistency scoring, reasoning validation and quality scores.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, Record};

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("response set for {0:?} needs at least 2 responses")]
    TooFewResponses(String),
    #[error("response set for {query_id:?} repeats model {model_id:?}")]
    DuplicateModel { query_id: String, model_id: String },
    #[error("judge failed on record {id:?}: {message}")]
    Indeterminate { id: String, message: String },
    #[error("no response set for record {0:?}")]
    MissingResponses(String),
    #[error("response set references unknown record {0:?}")]
    UnknownRecord(String),
    #[error("invalid similarity config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Text → vector function for the contextual half of [`sim`].
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Signed feature-hashing bag of words. Deterministic and dependency free;
/// a stand-in for a learned encoder.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dims: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dims: 256 }
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dims.max(1)];
        for token in tokenize(text) {
            let h = crate::seed::fnv1a64(token.as_bytes());
            let slot = (h % v.len() as u64) as usize;
            v[slot] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        v
    }
}

#[derive(Clone)]
pub struct SimilarityConfig {
    lexical_weight: f64,
    ngram_orders: Vec<usize>,
    embedder: Option<Arc<dyn Embedder>>,
}

impl std::fmt::Debug for SimilarityConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimilarityConfig")
            .field("lexical_weight", &self.lexical_weight)
            .field("ngram_orders", &self.ngram_orders)
            .field("embedder", &self.embedder.is_some())
            .finish()
    }
}

impl Default for SimilarityConfig {
    /// Lexical only, unigrams.
    fn default() -> Self {
        Self {
            lexical_weight: 1.0,
            ngram_orders: vec![1],
            embedder: None,
        }
    }
}

impl SimilarityConfig {
    pub fn lexical(ngram_orders: Vec<usize>) -> Result<Self, VerifyError> {
        Self::new(1.0, ngram_orders, None)
    }

    /// Without an embedder the lexical weight is forced to 1.
    pub fn new(
        lexical_weight: f64,
        ngram_orders: Vec<usize>,
        embedder: Option<Arc<dyn Embedder>>,
    ) -> Result<Self, VerifyError> {
        if !(0.0..=1.0).contains(&lexical_weight) {
            return Err(VerifyError::Config(format!(
                "lexical_weight {lexical_weight} outside [0, 1]"
            )));
        }
        if ngram_orders.is_empty() || ngram_orders.contains(&0) {
            return Err(VerifyError::Config(
                "ngram orders must be non-empty and positive".into(),
            ));
        }
        let lexical_weight = if embedder.is_some() { lexical_weight } else { 1.0 };
        Ok(Self {
            lexical_weight,
            ngram_orders,
            embedder,
        })
    }

    pub fn lexical_weight(&self) -> f64 {
        self.lexical_weight
    }

    pub fn embedding_weight(&self) -> f64 {
        1.0 - self.lexical_weight
    }
}

/// Lowercased whitespace tokens with surrounding punctuation stripped;
/// tokens that are all punctuation are dropped.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn ngrams(tokens: &[String], n: usize) -> HashSet<String> {
    tokens.windows(n).map(|w| w.join(" ")).collect()
}

/// Word n-gram Jaccard averaged over the configured orders. An order both
/// texts are too short for scores 1 when their token sequences are equal
/// and 0 otherwise.
pub fn lexical_jaccard(a: &str, b: &str, orders: &[usize]) -> f64 {
    let ta: Vec<String> = tokenize(a).collect();
    let tb: Vec<String> = tokenize(b).collect();
    if orders.is_empty() {
        return if ta == tb { 1.0 } else { 0.0 };
    }
    let total: f64 = orders
        .iter()
        .map(|&n| {
            let (sa, sb) = (ngrams(&ta, n), ngrams(&tb, n));
            if sa.is_empty() && sb.is_empty() {
                return if ta == tb { 1.0 } else { 0.0 };
            }
            let inter = sa.intersection(&sb).count();
            inter as f64 / (sa.len() + sb.len() - inter) as f64
        })
        .sum();
    total / orders.len() as f64
}

/// Cosine mapped into [0, 1] by `(cos + 1) / 2`. A zero or empty vector has
/// no direction and scores 0, so a failed embedding never adds similarity.
pub fn clamped_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    ((dot / (na * nb)).clamp(-1.0, 1.0) + 1.0) / 2.0
}

/// Blended lexical/embedding similarity in [0, 1].
pub fn sim(a: &str, b: &str, cfg: &SimilarityConfig) -> f64 {
    let a_empty = tokenize(a).next().is_none();
    let b_empty = tokenize(b).next().is_none();
    match (a_empty, b_empty) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    if a == b {
        return 1.0;
    }
    let lexical = lexical_jaccard(a, b, &cfg.ngram_orders);
    match &cfg.embedder {
        Some(embedder) if cfg.lexical_weight < 1.0 => {
            let cos = clamped_cosine(&embedder.embed(a), &embedder.embed(b));
            cfg.lexical_weight * lexical + (1.0 - cfg.lexical_weight) * cos
        }
        _ => lexical,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub model_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSet {
    pub query_id: String,
    pub responses: Vec<ModelResponse>,
}

impl ResponseSet {
    pub fn check(&self) -> Result<(), VerifyError> {
        if self.responses.len() < 2 {
            return Err(VerifyError::TooFewResponses(self.query_id.clone()));
        }
        let mut seen = HashSet::new();
        for r in &self.responses {
            if !seen.insert(r.model_id.as_str()) {
                return Err(VerifyError::DuplicateModel {
                    query_id: self.query_id.clone(),
                    model_id: r.model_id.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Mean similarity over all ordered pairs of distinct responses.
pub fn consistency(rs: &ResponseSet, cfg: &SimilarityConfig) -> Result<f64, VerifyError> {
    consistency_with(rs, |a, b| sim(a, b, cfg))
}

/// [`consistency`] with an arbitrary pairwise similarity.
pub fn consistency_with(rs: &ResponseSet, similarity: impl Fn(&str, &str) -> f64) -> Result<f64, VerifyError> {
    rs.check()?;
    let p = rs.responses.len();
    let mut total = 0.0;
    for j in 0..p {
        for k in 0..p {
            if j != k {
                total += similarity(&rs.responses[j].text, &rs.responses[k].text);
            }
        }
    }
    Ok(total / (p * (p - 1)) as f64)
}

/// Decides whether a record's answer follows from its reasoning.
pub trait Judge: Send + Sync {
    fn judge(&self, record: &Record) -> Result<bool, String>;
}

/// Accepts when the normalized answer occurs inside the normalized thinking.
///
/// Normalization lowercases, maps every non-alphanumeric character to a space
/// and collapses whitespace. Empty thinking never entails anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct SubstringJudge;

pub fn normalize_text(text: &str) -> String {
    let mapped: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Judge for SubstringJudge {
    fn judge(&self, record: &Record) -> Result<bool, String> {
        let thinking = normalize_text(&record.thinking);
        let answer = normalize_text(&record.answer);
        if thinking.is_empty() || answer.is_empty() {
            return Ok(false);
        }
        let padded_thinking = format!(" {thinking} ");
        Ok(padded_thinking.contains(&format!(" {answer} ")))
    }
}

/// Constant verdict; useful for wiring tests.
#[derive(Debug, Clone, Copy)]
pub struct FixedJudge(pub bool);

impl Judge for FixedJudge {
    fn judge(&self, _record: &Record) -> Result<bool, String> {
        Ok(self.0)
    }
}

pub fn reasoning_validate(record: &Record, judge: &dyn Judge) -> Result<bool, VerifyError> {
    judge.judge(record).map_err(|message| VerifyError::Indeterminate {
        id: record.id.clone(),
        message,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerdictInputs {
    pub consistency: f64,
    pub reasoning_valid: bool,
    pub clean_flag: Option<bool>,
}

/// Rating model: maps a record and its verification evidence to [0, 1].
pub trait RatingModel: Send + Sync {
    fn score(&self, record: &Record, inputs: &VerdictInputs) -> f64;
}

/// `0.6·consistency + 0.4·[reasoning_valid]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearRating;

impl RatingModel for LinearRating {
    fn score(&self, _record: &Record, inputs: &VerdictInputs) -> f64 {
        let valid = if inputs.reasoning_valid { 1.0 } else { 0.0 };
        (0.6 * inputs.consistency + 0.4 * valid).clamp(0.0, 1.0)
    }
}

pub fn score_record(record: &Record, inputs: &VerdictInputs, rm: &dyn RatingModel) -> f64 {
    rm.score(record, inputs).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub consistency: f64,
    pub reasoning_valid: bool,
    pub score: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub verdicts: BTreeMap<String, QualityVerdict>,
    /// Records whose judge call failed; they are flagged unverified.
    pub indeterminate: Vec<String>,
}

/// Runs consistency, reasoning validation and rating over every record and
/// writes `verify_flag` and `quality_score` back. A judge failure marks the
/// record unverified instead of aborting.
pub fn verify_corpus(
    corpus: &Corpus,
    responses: &[ResponseSet],
    cfg: &SimilarityConfig,
    judge: &dyn Judge,
    rm: &dyn RatingModel,
) -> Result<(Corpus, VerifyReport), VerifyError> {
    let mut by_id: BTreeMap<&str, &ResponseSet> = BTreeMap::new();
    for rs in responses {
        if corpus.get(&rs.query_id).is_none() {
            return Err(VerifyError::UnknownRecord(rs.query_id.clone()));
        }
        by_id.insert(rs.query_id.as_str(), rs);
    }
    let mut report = VerifyReport::default();
    let mut out = Vec::with_capacity(corpus.len());
    for record in corpus.records() {
        let rs = by_id
            .get(record.id.as_str())
            .ok_or_else(|| VerifyError::MissingResponses(record.id.clone()))?;
        let consistency = consistency(rs, cfg)?;
        let reasoning_valid = match reasoning_validate(record, judge) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("{e}; flagging unverified");
                report.indeterminate.push(record.id.clone());
                false
            }
        };
        let inputs = VerdictInputs {
            consistency,
            reasoning_valid,
            clean_flag: record.clean_flag,
        };
        let score = score_record(record, &inputs, rm);
        let mut updated = record.clone();
        updated.verify_flag = Some(reasoning_valid);
        updated.quality_score = Some(score);
        report.verdicts.insert(
            record.id.clone(),
            QualityVerdict {
                consistency,
                reasoning_valid,
                score,
            },
        );
        out.push(updated);
    }
    Ok((Corpus::from_records(out)?, report))
}
