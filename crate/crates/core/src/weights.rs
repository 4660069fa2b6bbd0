//! Difficulty-aware per-label training weights.
//!
//! Per label: draw a stratified sample, collect responses from the current
//! model and every reference model, turn them into pass@k values, combine
//! them into a raw weight, smooth against the previous epoch, clip at the
//! base weight and finally rescale so the weights average to one.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{stratified_sample, Corpus, CorpusError, Record};
use crate::label::{LabelCatalog, LabelKey};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum WeightError {
    #[error("no outcomes to score")]
    NoOutcomes,
    #[error("outcomes mix labels or models ({0})")]
    MixedOutcomes(String),
    #[error("instance {instance:?} has {got} responses, expected {expected}")]
    ResponseCount {
        instance: String,
        got: usize,
        expected: usize,
    },
    #[error("invalid weight parameters: {0}")]
    Params(String),
    #[error("evaluator failed on label {label} with no previous weight to carry forward: {message}")]
    EvaluatorFailed { label: LabelKey, message: String },
    #[error("label {0} has no weight in the table")]
    MissingLabel(LabelKey),
    #[error("no samples supplied")]
    NoSamples,
    #[error("negative log-likelihood {0} is negative")]
    NegativeNll(f64),
    #[error("corpus has no labels to weight")]
    NoLabels,
    #[error("cannot access {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub text: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub label: LabelKey,
    pub instance_id: String,
    pub model_id: String,
    pub responses: Vec<Response>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum PassKMode {
    /// Exactly `k` responses; an instance passes when any is correct.
    #[default]
    AnyOfK,
    /// `n_total ≥ k` responses; unbiased estimator `1 − C(n−c, k) / C(n, k)`.
    Unbiased { n_total: usize },
}

impl PassKMode {
    /// Responses to request per instance.
    pub fn responses_needed(&self, k: usize) -> usize {
        match *self {
            PassKMode::AnyOfK => k,
            PassKMode::Unbiased { n_total } => n_total,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightParams {
    pub alpha: f64,
    pub beta: f64,
    /// Additive base weight and clipping floor.
    pub gamma: f64,
    pub rho: f64,
    /// Instances sampled per label.
    pub n: usize,
    /// Responses scored per instance.
    pub k: usize,
    pub passk_mode: PassKMode,
}

impl Default for WeightParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            rho: 0.5,
            n: 32,
            k: 4,
            passk_mode: PassKMode::AnyOfK,
        }
    }
}

impl WeightParams {
    pub fn validate(&self) -> Result<(), WeightError> {
        let bad = |m: String| Err(WeightError::Params(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad(format!(
                "alpha {} and beta {} must be nonnegative",
                self.alpha, self.beta
            ));
        }
        if self.alpha + self.beta <= 0.0 {
            return bad("alpha + beta must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {} must be positive", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0, 1]", self.rho));
        }
        if self.n == 0 || self.k == 0 {
            return bad("n and k must be at least 1".into());
        }
        if let PassKMode::Unbiased { n_total } = self.passk_mode {
            if n_total < self.k {
                return bad(format!("n_total {n_total} < k {}", self.k));
            }
        }
        Ok(())
    }

    /// Short SHA-256 digest of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("params serialize");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) after the multiplication.
        acc = acc.checked_mul(u128::from(n - i))? / u128::from(i + 1);
    }
    Some(acc)
}

/// Unbiased pass@k for one instance with `n` responses of which `c` are
/// correct.
pub fn unbiased_pass_at_k(n: usize, c: usize, k: usize) -> f64 {
    assert!(k >= 1 && k <= n && c <= n, "require 1 <= k <= n and c <= n");
    if n - c < k {
        return 1.0;
    }
    match (binomial((n - c) as u64, k as u64), binomial(n as u64, k as u64)) {
        (Some(fail), Some(total)) => (total - fail) as f64 / total as f64,
        _ => {
            // 1 − Π_{i=n−c+1}^{n} (1 − k/i)
            let prod: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
            1.0 - prod
        }
    }
}

/// Mean per-instance pass@k over outcomes for a single (label, model).
pub fn pass_at_k(outcomes: &[EvalOutcome], k: usize, mode: PassKMode) -> Result<f64, WeightError> {
    let first = outcomes.first().ok_or(WeightError::NoOutcomes)?;
    if k == 0 {
        return Err(WeightError::Params("k must be at least 1".into()));
    }
    let expected = mode.responses_needed(k);
    if expected < k {
        return Err(WeightError::Params(format!("n_total {expected} < k {k}")));
    }
    let mut total = 0.0;
    for o in outcomes {
        if o.label != first.label || o.model_id != first.model_id {
            return Err(WeightError::MixedOutcomes(format!(
                "{}@{} vs {}@{}",
                first.label, first.model_id, o.label, o.model_id
            )));
        }
        if o.responses.len() != expected {
            return Err(WeightError::ResponseCount {
                instance: o.instance_id.clone(),
                got: o.responses.len(),
                expected,
            });
        }
        let correct = o.responses.iter().filter(|r| r.correct).count();
        total += match mode {
            PassKMode::AnyOfK => {
                if correct > 0 {
                    1.0
                } else {
                    0.0
                }
            }
            PassKMode::Unbiased { n_total } => unbiased_pass_at_k(n_total, correct, k),
        };
    }
    Ok(total / outcomes.len() as f64)
}

/// `α(1 − p_cur) + β·max(0, mean(p_ref) − p_cur) + γ`. With no reference
/// values the middle term is zero.
pub fn raw_weight(pass_current: f64, pass_refs: &[f64], params: &WeightParams) -> f64 {
    let ref_term = if pass_refs.is_empty() {
        log::warn!("no reference pass@k values; reference term set to 0");
        0.0
    } else {
        let mean = pass_refs.iter().sum::<f64>() / pass_refs.len() as f64;
        (mean - pass_current).max(0.0)
    };
    params.alpha * (1.0 - pass_current) + params.beta * ref_term + params.gamma
}

/// Exponential smoothing `ρ·prev + (1 − ρ)·raw`; the first epoch passes the
/// raw weight through. Written as `raw + ρ·(prev − raw)` so `prev == raw` is
/// an exact fixed point.
pub fn smooth(prev: Option<f64>, raw: f64, rho: f64) -> f64 {
    match prev {
        None => raw,
        Some(p) => raw + rho * (p - raw),
    }
}

/// Clip every weight up to `gamma`, then rescale so the weights sum to the
/// number of labels.
pub fn clip_and_normalize(smoothed: &BTreeMap<LabelKey, f64>, gamma: f64) -> BTreeMap<LabelKey, f64> {
    let clipped: BTreeMap<&LabelKey, f64> = smoothed.iter().map(|(k, &v)| (k, v.max(gamma))).collect();
    let total: f64 = clipped.values().sum();
    let count = clipped.len() as f64;
    clipped
        .into_iter()
        .map(|(k, v)| (k.clone(), v / total * count))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub pass_current: Option<f64>,
    #[serde(default)]
    pub pass_refs: Vec<f64>,
    pub raw: f64,
    /// Smoothed and clipped; becomes `previous` next epoch.
    pub smoothed: f64,
    pub previous: Option<f64>,
    pub normalized: f64,
    pub sampled: usize,
    /// Fewer than `n` records were available for this label.
    pub shortfall: bool,
    /// Evaluation failed; smoothed weight carried over from the previous table.
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub epoch: u32,
    pub params_hash: String,
    pub labels: BTreeMap<LabelKey, WeightEntry>,
}

impl WeightTable {
    pub fn weight(&self, label: &LabelKey) -> Option<f64> {
        self.labels.get(label).map(|e| e.normalized)
    }

    pub fn normalized_sum(&self) -> f64 {
        self.labels.values().map(|e| e.normalized).sum()
    }

    /// Table where every label weighs 1.
    pub fn uniform<'a>(labels: impl IntoIterator<Item = &'a LabelKey>) -> Self {
        Self {
            epoch: 0,
            params_hash: String::new(),
            labels: labels
                .into_iter()
                .map(|l| {
                    (
                        l.clone(),
                        WeightEntry {
                            pass_current: None,
                            pass_refs: Vec::new(),
                            raw: 1.0,
                            smoothed: 1.0,
                            previous: None,
                            normalized: 1.0,
                            sampled: 0,
                            shortfall: false,
                            stale: false,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WeightError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| WeightError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WeightError> {
        let path = path.as_ref();
        let io = |message: String| WeightError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }
}

/// A model that can be asked for `count` scored responses to a record.
///
/// Correctness is judged by the implementation; the same `seed` must yield
/// the same responses.
pub trait ResponseModel: Send + Sync {
    fn model_id(&self) -> &str;
    fn respond(&self, record: &Record, count: usize, seed: u64) -> Result<Vec<Response>, String>;
}

fn collect_outcomes(
    model: &dyn ResponseModel,
    sample: &[&Record],
    count: usize,
    seed: u64,
) -> Result<Vec<EvalOutcome>, String> {
    sample
        .iter()
        .map(|record| {
            // Shared per-instance seed across models gives common random numbers.
            let responses = model.respond(record, count, seed::derive(seed, &record.id))?;
            Ok(EvalOutcome {
                label: record.label.clone(),
                instance_id: record.id.clone(),
                model_id: model.model_id().to_string(),
                responses,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightEstimate {
    pub table: WeightTable,
    /// Catalog labels with no records; excluded from the table.
    pub missing_labels: Vec<LabelKey>,
    pub warnings: Vec<String>,
}

struct LabelMeasurement {
    pass_current: f64,
    pass_refs: Vec<f64>,
    sampled: usize,
}

/// One epoch of difficulty-weight estimation over every label present in the
/// corpus. Every model sees the identical stratified sample for a label.
pub fn estimate_weights(
    corpus: &Corpus,
    catalog: &LabelCatalog,
    current: &dyn ResponseModel,
    references: &[&dyn ResponseModel],
    params: &WeightParams,
    prev_table: Option<&WeightTable>,
    seed: u64,
) -> Result<WeightEstimate, WeightError> {
    params.validate()?;
    corpus.check_labels(catalog)?;
    let labels = corpus.labels();
    if labels.is_empty() {
        return Err(WeightError::NoLabels);
    }
    let missing_labels: Vec<LabelKey> = catalog
        .labels()
        .filter(|l| labels.binary_search(l).is_err())
        .cloned()
        .collect();
    let mut warnings = Vec::new();
    if references.is_empty() {
        warnings.push("no reference models; reference term is zero for every label".to_string());
    }
    for l in &missing_labels {
        warnings.push(format!("catalog label {l} has no records and is not weighted"));
    }
    let count = params.passk_mode.responses_needed(params.k);

    let measurements: Vec<(LabelKey, Result<LabelMeasurement, String>)> = labels
        .par_iter()
        .map(|label| {
            let measure = || -> Result<LabelMeasurement, String> {
                let sample = stratified_sample(corpus, label, params.n, seed).map_err(|e| e.to_string())?;
                let score = |model: &dyn ResponseModel| -> Result<f64, String> {
                    let outcomes = collect_outcomes(model, &sample, count, seed)?;
                    pass_at_k(&outcomes, params.k, params.passk_mode).map_err(|e| e.to_string())
                };
                let pass_current = score(current)?;
                let pass_refs = references.iter().map(|m| score(*m)).collect::<Result<Vec<_>, _>>()?;
                Ok(LabelMeasurement {
                    pass_current,
                    pass_refs,
                    sampled: sample.len(),
                })
            };
            (label.clone(), measure())
        })
        .collect();

    let mut entries = BTreeMap::new();
    for (label, measured) in measurements {
        let previous = prev_table.and_then(|t| t.labels.get(&label));
        let entry = match measured {
            Ok(m) => {
                let raw = raw_weight(m.pass_current, &m.pass_refs, params);
                let prev_smoothed = previous.map(|p| p.smoothed);
                let smoothed = smooth(prev_smoothed, raw, params.rho).max(params.gamma);
                let shortfall = m.sampled < params.n;
                if shortfall {
                    warnings.push(format!(
                        "label {label}: only {} of {} requested instances available",
                        m.sampled, params.n
                    ));
                }
                WeightEntry {
                    pass_current: Some(m.pass_current),
                    pass_refs: m.pass_refs,
                    raw,
                    smoothed,
                    previous: prev_smoothed,
                    normalized: 0.0,
                    sampled: m.sampled,
                    shortfall,
                    stale: false,
                }
            }
            Err(message) => {
                let Some(prev) = previous else {
                    return Err(WeightError::EvaluatorFailed { label, message });
                };
                warnings.push(format!(
                    "label {label}: evaluation failed ({message}); carrying previous weight"
                ));
                WeightEntry {
                    pass_current: None,
                    pass_refs: Vec::new(),
                    raw: prev.raw,
                    smoothed: prev.smoothed.max(params.gamma),
                    previous: Some(prev.smoothed),
                    normalized: 0.0,
                    sampled: 0,
                    shortfall: false,
                    stale: true,
                }
            }
        };
        entries.insert(label, entry);
    }
    let smoothed: BTreeMap<LabelKey, f64> = entries.iter().map(|(k, e)| (k.clone(), e.smoothed)).collect();
    for (label, w) in clip_and_normalize(&smoothed, params.gamma) {
        entries.get_mut(&label).expect("same keys").normalized = w;
    }
    Ok(WeightEstimate {
        table: WeightTable {
            epoch: prev_table.map_or(1, |t| t.epoch + 1),
            params_hash: params.digest(),
            labels: entries,
        },
        missing_labels,
        warnings,
    })
}

/// `(1/N) Σ w̃_{t_i} · NLL_i`.
pub fn weighted_sft_loss(samples: &[(LabelKey, f64)], table: &WeightTable) -> Result<f64, WeightError> {
    if samples.is_empty() {
        return Err(WeightError::NoSamples);
    }
    let mut total = 0.0;
    for (label, nll) in samples {
        if *nll < 0.0 {
            return Err(WeightError::NegativeNll(*nll));
        }
        let w = table
            .weight(label)
            .ok_or_else(|| WeightError::MissingLabel(label.clone()))?;
        total += w * nll;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeight {
    pub id: String,
    pub label: LabelKey,
    pub weight: f64,
}

/// Per-record weights, one line per record in corpus order.
pub fn per_sample_weights(corpus: &Corpus, table: &WeightTable) -> Result<Vec<SampleWeight>, WeightError> {
    corpus
        .records()
        .iter()
        .map(|r| {
            Ok(SampleWeight {
                id: r.id.clone(),
                label: r.label.clone(),
                weight: table
                    .weight(&r.label)
                    .ok_or_else(|| WeightError::MissingLabel(r.label.clone()))?,
            })
        })
        .collect()
}

pub fn sample_weights_jsonl(weights: &[SampleWeight]) -> String {
    let mut out = String::new();
    for w in weights {
        out.push_str(&serde_json::to_string(w).expect("weight serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(s: &str) -> LabelKey {
        s.parse().unwrap()
    }

    fn outcome(pattern: &[bool]) -> EvalOutcome {
        EvalOutcome {
            label: key("a/x"),
            instance_id: format!("{pattern:?}"),
            model_id: "m".into(),
            responses: pattern
                .iter()
                .map(|&c| Response {
                    text: String::new(),
                    correct: c,
                })
                .collect(),
        }
    }

    #[test]
    fn any_of_k_examples() {
        let o = [
            outcome(&[false, true, false]),
            outcome(&[true, true, true]),
            outcome(&[false, false, false]),
        ];
        assert!((pass_at_k(&o, 3, PassKMode::AnyOfK).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let all = [outcome(&[true, true]), outcome(&[true, true])];
        assert_eq!(pass_at_k(&all, 2, PassKMode::AnyOfK).unwrap(), 1.0);
        assert!(matches!(
            pass_at_k(&[], 1, PassKMode::AnyOfK),
            Err(WeightError::NoOutcomes)
        ));
    }

    #[test]
    fn unbiased_example() {
        // C(4,2) = 6 subsets of two responses, only the two wrong ones fail.
        assert_eq!(unbiased_pass_at_k(4, 2, 2), 5.0 / 6.0);
        let o = [outcome(&[true, true, false, false])];
        assert_eq!(pass_at_k(&o, 2, PassKMode::Unbiased { n_total: 4 }).unwrap(), 5.0 / 6.0);
    }

    #[test]
    fn unbiased_large_n_falls_back() {
        let v = unbiased_pass_at_k(400, 3, 200);
        assert!((0.0..=1.0).contains(&v));
        // C(397,200)/C(400,200) = (200·199·198)/(400·399·398)
        let expected = 1.0 - (200.0 * 199.0 * 198.0) / (400.0 * 399.0 * 398.0);
        assert!((v - expected).abs() < 1e-12, "{v} {expected}");
    }

    #[test]
    fn pass_at_k_rejects_inconsistent_input() {
        let mut other = outcome(&[true]);
        other.model_id = "n".into();
        assert!(matches!(
            pass_at_k(&[outcome(&[true]), other], 1, PassKMode::AnyOfK),
            Err(WeightError::MixedOutcomes(_))
        ));
        assert!(matches!(
            pass_at_k(&[outcome(&[true, false])], 1, PassKMode::AnyOfK),
            Err(WeightError::ResponseCount { .. })
        ));
    }

    #[test]
    fn raw_weight_examples() {
        let p = |alpha, beta, gamma| WeightParams {
            alpha,
            beta,
            gamma,
            ..Default::default()
        };
        assert_eq!(raw_weight(1.0, &[1.0, 1.0], &p(2.0, 3.0, 0.25)), 0.25);
        assert!((raw_weight(0.4, &[0.7], &p(1.0, 0.5, 0.1)) - 0.85).abs() < 1e-12);
        assert!((raw_weight(0.9, &[0.5], &p(1.0, 1.0, 0.1)) - 0.2).abs() < 1e-12);
        assert!((raw_weight(0.4, &[], &p(1.0, 0.5, 0.1)) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn smooth_examples() {
        assert_eq!(smooth(None, 0.85, 0.8), 0.85);
        assert!((smooth(Some(1.0), 0.5, 0.8) - 0.9).abs() < 1e-15);
        assert_eq!(smooth(Some(0.3), 0.3, 0.37), 0.3);
    }

    #[test]
    fn clip_and_normalize_examples() {
        let m =
            |pairs: &[(&str, f64)]| -> BTreeMap<LabelKey, f64> { pairs.iter().map(|(k, v)| (key(k), *v)).collect() };
        let out = clip_and_normalize(&m(&[("a/a", 0.85), ("b/b", 0.85)]), 0.1);
        assert_eq!(out.values().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
        let out = clip_and_normalize(&m(&[("a/a", 1.0), ("b/b", 3.0)]), 0.1);
        assert_eq!(out.values().copied().collect::<Vec<_>>(), vec![0.5, 1.5]);
        let out = clip_and_normalize(&m(&[("a/a", 0.02), ("b/b", 1.0)]), 0.1);
        assert!((out[&key("a/a")] - 0.2 / 1.1).abs() < 1e-12);
        assert!((out[&key("b/b")] - 2.0 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let mut table = WeightTable::uniform([&key("a/a"), &key("b/b")]);
        let samples = vec![(key("a/a"), 0.5), (key("b/b"), 1.5)];
        assert_eq!(weighted_sft_loss(&samples, &table).unwrap(), 1.0);
        table.labels.get_mut(&key("a/a")).unwrap().normalized = 1.5;
        table.labels.get_mut(&key("b/b")).unwrap().normalized = 0.5;
        let samples = vec![(key("a/a"), 1.0), (key("b/b"), 2.0)];
        assert_eq!(weighted_sft_loss(&samples, &table).unwrap(), 1.25);
        assert!(matches!(weighted_sft_loss(&[], &table), Err(WeightError::NoSamples)));
        assert!(matches!(
            weighted_sft_loss(&[(key("c/c"), 1.0)], &table),
            Err(WeightError::MissingLabel(_))
        ));
    }

    #[test]
    fn params_validation() {
        assert!(WeightParams::default().validate().is_ok());
        let bad = WeightParams {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = WeightParams {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = WeightParams {
            k: 4,
            passk_mode: PassKMode::Unbiased { n_total: 3 },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
