//! Deduplication, detoxification, decontamination and the final quality gate.
//!
//! Stages always run in the order dedup → detox → decontaminate →
//! final filter; each stage drops records and reports their ids.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, Record};
use crate::label::LabelKey;
use crate::seed;
use crate::verification::normalize_text;

#[derive(Debug, thiserror::Error)]
pub enum GovernanceError {
    #[error("invalid dedup config: {0}")]
    DedupConfig(String),
    #[error("invalid denylist pattern {pattern:?}: {message}")]
    Pattern { pattern: String, message: String },
    #[error("contamination n-gram size must be at least 8, got {0}")]
    NgramSize(usize),
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("record {id:?} has no {field}")]
    MissingField { id: String, field: &'static str },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DedupMode {
    /// Min-hash sketches with LSH banding for candidate generation.
    #[default]
    Sketch,
    /// Exact shingle-set Jaccard against every survivor.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    /// Characters per shingle.
    pub shingle_size: usize,
    pub num_hashes: usize,
    pub jaccard_threshold: f64,
    /// Seeds the hash family.
    pub seed: u64,
    pub mode: DedupMode,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            shingle_size: 5,
            num_hashes: 128,
            jaccard_threshold: 0.9,
            seed: 0,
            mode: DedupMode::Sketch,
        }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<(), GovernanceError> {
        if self.shingle_size < 2 {
            return Err(GovernanceError::DedupConfig(format!(
                "shingle_size {} < 2",
                self.shingle_size
            )));
        }
        if self.num_hashes < 16 {
            return Err(GovernanceError::DedupConfig(format!(
                "num_hashes {} < 16",
                self.num_hashes
            )));
        }
        if !(self.jaccard_threshold > 0.0 && self.jaccard_threshold <= 1.0) {
            return Err(GovernanceError::DedupConfig(format!(
                "jaccard_threshold {} outside (0, 1]",
                self.jaccard_threshold
            )));
        }
        Ok(())
    }
}

/// Text used for near-duplicate detection: the three fields joined by
/// newlines, lowercased.
pub fn dedup_text(record: &Record) -> String {
    format!("{}\n{}\n{}", record.query, record.thinking, record.answer).to_lowercase()
}

/// Hashed character shingles. Texts shorter than `k` yield one shingle.
pub fn shingles(text: &str, k: usize) -> HashSet<u64> {
    let chars: Vec<char> = text.chars().collect();
    let mut set = HashSet::new();
    if chars.len() < k {
        set.insert(seed::fnv1a64(text.as_bytes()));
        return set;
    }
    let mut buf = String::new();
    for window in chars.windows(k) {
        buf.clear();
        buf.extend(window);
        set.insert(seed::fnv1a64(buf.as_bytes()));
    }
    set
}

pub fn exact_jaccard(a: &HashSet<u64>, b: &HashSet<u64>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

const MERSENNE_61: u64 = (1 << 61) - 1;

/// Universal hash family `h_i(x) = (a_i·x + b_i) mod (2^61 − 1)` with
/// `(a_i, b_i)` drawn from ChaCha8 seeded by the config seed.
#[derive(Debug, Clone)]
pub struct MinHasher {
    coefficients: Vec<(u64, u64)>,
}

impl MinHasher {
    pub fn new(num_hashes: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, "minhash"));
        let coefficients = (0..num_hashes)
            .map(|_| (rng.gen_range(1..MERSENNE_61), rng.gen_range(0..MERSENNE_61)))
            .collect();
        Self { coefficients }
    }

    pub fn sketch(&self, shingles: &HashSet<u64>) -> Vec<u64> {
        self.coefficients
            .iter()
            .map(|&(a, b)| {
                shingles
                    .iter()
                    .map(|&x| {
                        let x = u128::from(x % MERSENNE_61);
                        ((u128::from(a) * x + u128::from(b)) % u128::from(MERSENNE_61)) as u64
                    })
                    .min()
                    .unwrap_or(u64::MAX)
            })
            .collect()
    }
}

/// Fraction of agreeing sketch slots.
pub fn estimated_jaccard(a: &[u64], b: &[u64]) -> f64 {
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count();
    agree as f64 / a.len() as f64
}

/// Largest rows-per-band `r` (with `num_hashes / r` bands) whose candidate
/// probability at `threshold` is at least 0.999.
pub fn band_rows(num_hashes: usize, threshold: f64) -> usize {
    let mut best = 1;
    for rows in 1..=num_hashes {
        let bands = num_hashes / rows;
        let p = 1.0 - (1.0 - threshold.powi(rows as i32)).powi(bands as i32);
        if p >= 0.999 {
            best = rows;
        }
    }
    best
}

/// Near-duplicate removal. Records are visited in corpus order; a record is
/// dropped when its (estimated or exact) shingle Jaccard with any earlier
/// survivor reaches the threshold.
pub fn dedup(corpus: &Corpus, cfg: &DedupConfig) -> Result<(Corpus, Vec<String>), GovernanceError> {
    cfg.validate()?;
    let shingle_sets: Vec<HashSet<u64>> = corpus
        .records()
        .par_iter()
        .map(|r| shingles(&dedup_text(r), cfg.shingle_size))
        .collect();
    let keep = match cfg.mode {
        DedupMode::Exact => {
            let mut survivors: Vec<usize> = Vec::new();
            let mut keep = vec![false; shingle_sets.len()];
            for (i, set) in shingle_sets.iter().enumerate() {
                let dup = survivors
                    .iter()
                    .any(|&j| exact_jaccard(set, &shingle_sets[j]) >= cfg.jaccard_threshold);
                if !dup {
                    survivors.push(i);
                    keep[i] = true;
                }
            }
            keep
        }
        DedupMode::Sketch => {
            let hasher = MinHasher::new(cfg.num_hashes, cfg.seed);
            let sketches: Vec<Vec<u64>> = shingle_sets.par_iter().map(|s| hasher.sketch(s)).collect();
            let rows = band_rows(cfg.num_hashes, cfg.jaccard_threshold);
            let bands = cfg.num_hashes / rows;
            let mut buckets: HashMap<(usize, u64), Vec<usize>> = HashMap::new();
            let mut keep = vec![false; sketches.len()];
            for (i, sketch) in sketches.iter().enumerate() {
                let keys: Vec<(usize, u64)> = (0..bands)
                    .map(|b| {
                        let band = &sketch[b * rows..(b + 1) * rows];
                        let bytes: Vec<u8> = band.iter().flat_map(|v| v.to_le_bytes()).collect();
                        (b, seed::fnv1a64(&bytes))
                    })
                    .collect();
                let mut checked = HashSet::new();
                let dup = keys.iter().any(|key| {
                    buckets.get(key).is_some_and(|members| {
                        members.iter().any(|&j| {
                            checked.insert(j) && estimated_jaccard(sketch, &sketches[j]) >= cfg.jaccard_threshold
                        })
                    })
                });
                if !dup {
                    keep[i] = true;
                    for key in keys {
                        buckets.entry(key).or_default().push(i);
                    }
                }
            }
            keep
        }
    };
    Ok(split(corpus, &keep, |r| r.clone())?)
}

fn split(
    corpus: &Corpus,
    keep: &[bool],
    mut update: impl FnMut(&Record) -> Record,
) -> Result<(Corpus, Vec<String>), CorpusError> {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (record, &k) in corpus.records().iter().zip(keep) {
        if k {
            kept.push(update(record));
        } else {
            removed.push(record.id.clone());
        }
    }
    Ok((Corpus::from_records(kept)?, removed))
}

pub fn compile_denylist(patterns: &[String]) -> Result<Vec<Regex>, GovernanceError> {
    patterns
        .iter()
        .map(|p| {
            RegexBuilder::new(p)
                .case_insensitive(true)
                .build()
                .map_err(|e| GovernanceError::Pattern {
                    pattern: p.clone(),
                    message: e.to_string(),
                })
        })
        .collect()
}

/// Reads a denylist file: one pattern per line; blank lines and lines
/// starting with `#` are ignored.
pub fn read_denylist(path: impl AsRef<Path>) -> Result<Vec<String>, GovernanceError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GovernanceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Drops any record with a denylist match in any field (case-insensitive).
/// Survivors are marked clean unless already explicitly marked unclean.
pub fn detox(corpus: &Corpus, patterns: &[String]) -> Result<(Corpus, Vec<String>), GovernanceError> {
    let compiled = compile_denylist(patterns)?;
    let keep: Vec<bool> = corpus
        .records()
        .par_iter()
        .map(|r| !r.fields().iter().any(|f| compiled.iter().any(|re| re.is_match(f))))
        .collect();
    Ok(split(corpus, &keep, |r| {
        let mut r = r.clone();
        r.clean_flag = Some(r.clean_flag.unwrap_or(true));
        r
    })?)
}

/// Hashed word n-grams drawn from evaluation sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContaminationIndex {
    ngram_size: usize,
    ngrams: HashSet<u64>,
}

/// Normalized word n-gram hashes of `text`.
pub fn word_ngrams(text: &str, n: usize) -> Vec<u64> {
    let normalized = normalize_text(text);
    let words: Vec<&str> = normalized.split(' ').filter(|w| !w.is_empty()).collect();
    words
        .windows(n)
        .map(|w| seed::fnv1a64(w.join(" ").as_bytes()))
        .collect()
}

impl ContaminationIndex {
    pub fn new(ngram_size: usize) -> Result<Self, GovernanceError> {
        if ngram_size < 8 {
            return Err(GovernanceError::NgramSize(ngram_size));
        }
        Ok(Self {
            ngram_size,
            ngrams: HashSet::new(),
        })
    }

    pub fn ngram_size(&self) -> usize {
        self.ngram_size
    }

    pub fn len(&self) -> usize {
        self.ngrams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ngrams.is_empty()
    }

    pub fn add_text(&mut self, text: &str) {
        self.ngrams.extend(word_ngrams(text, self.ngram_size));
    }

    /// Indexes an eval file. Lines that parse as JSON objects contribute
    /// their `query`/`question`/`prompt`/`answer` string fields; any other
    /// line is indexed as plain text.
    pub fn add_file(&mut self, path: impl AsRef<Path>) -> Result<(), GovernanceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GovernanceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for line in text.lines() {
            match serde_json::from_str::<serde_json::Value>(line) {
                Ok(serde_json::Value::Object(map)) => {
                    for key in ["query", "question", "prompt", "answer"] {
                        if let Some(serde_json::Value::String(s)) = map.get(key) {
                            self.add_text(s);
                        }
                    }
                }
                _ => self.add_text(line),
            }
        }
        Ok(())
    }

    pub fn contains_any(&self, text: &str) -> bool {
        word_ngrams(text, self.ngram_size)
            .iter()
            .any(|h| self.ngrams.contains(h))
    }
}

/// Drops records whose query or answer shares any indexed n-gram.
pub fn decontaminate(corpus: &Corpus, index: &ContaminationIndex) -> Result<(Corpus, Vec<String>), GovernanceError> {
    let keep: Vec<bool> = corpus
        .records()
        .par_iter()
        .map(|r| !(index.contains_any(&r.query) || index.contains_any(&r.answer)))
        .collect();
    Ok(split(corpus, &keep, |r| r.clone())?)
}

/// Quality threshold, global with optional per-label overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
    #[serde(default)]
    pub per_label: BTreeMap<LabelKey, f64>,
}

impl Threshold {
    pub fn global(tau: f64) -> Self {
        Self {
            tau,
            per_label: BTreeMap::new(),
        }
    }

    pub fn for_label(&self, label: &LabelKey) -> f64 {
        self.per_label.get(label).copied().unwrap_or(self.tau)
    }

    pub fn validate(&self) -> Result<(), GovernanceError> {
        for &t in std::iter::once(&self.tau).chain(self.per_label.values()) {
            if !(0.0..=1.0).contains(&t) {
                return Err(GovernanceError::Threshold(t));
            }
        }
        Ok(())
    }
}

/// `verify ∧ clean ∧ score > τ`.
pub fn passes_final(record: &Record, tau: f64) -> Result<bool, GovernanceError> {
    let missing = |field| GovernanceError::MissingField {
        id: record.id.clone(),
        field,
    };
    let verify = record.verify_flag.ok_or_else(|| missing("verify_flag"))?;
    let clean = record.clean_flag.ok_or_else(|| missing("clean_flag"))?;
    let score = record.quality_score.ok_or_else(|| missing("quality_score"))?;
    Ok(verify && clean && score > tau)
}

pub fn final_filter(corpus: &Corpus, threshold: &Threshold) -> Result<(Corpus, Vec<String>), GovernanceError> {
    threshold.validate()?;
    let keep = corpus
        .records()
        .iter()
        .map(|r| passes_final(r, threshold.for_label(&r.label)))
        .collect::<Result<Vec<bool>, _>>()?;
    Ok(split(corpus, &keep, |r| r.clone())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GovernanceReport {
    pub input_count: usize,
    pub dedup_removed: usize,
    pub detox_removed: usize,
    pub decontam_removed: usize,
    pub below_threshold_removed: usize,
    pub output_count: usize,
    pub removed_ids: BTreeMap<String, Vec<String>>,
}

impl GovernanceReport {
    pub fn reconciles(&self) -> bool {
        self.input_count
            == self.output_count
                + self.dedup_removed
                + self.detox_removed
                + self.decontam_removed
                + self.below_threshold_removed
    }
}

#[derive(Debug, Clone)]
pub struct GovernanceParams {
    pub dedup: DedupConfig,
    pub denylist: Vec<String>,
    pub threshold: Threshold,
}

/// Full governance pipeline producing the final corpus.
pub fn govern(
    corpus: &Corpus,
    params: &GovernanceParams,
    index: &ContaminationIndex,
) -> Result<(Corpus, GovernanceReport), GovernanceError> {
    // Validate every stage's config before doing any work.
    params.dedup.validate()?;
    compile_denylist(&params.denylist)?;
    params.threshold.validate()?;

    let (after_dedup, dedup_ids) = dedup(corpus, &params.dedup)?;
    let (after_detox, detox_ids) = detox(&after_dedup, &params.denylist)?;
    let (after_decon, decon_ids) = decontaminate(&after_detox, index)?;
    let (output, filter_ids) = final_filter(&after_decon, &params.threshold)?;
    let report = GovernanceReport {
        input_count: corpus.len(),
        dedup_removed: dedup_ids.len(),
        detox_removed: detox_ids.len(),
        decontam_removed: decon_ids.len(),
        below_threshold_removed: filter_ids.len(),
        output_count: output.len(),
        removed_ids: BTreeMap::from([
            ("dedup".to_string(), dedup_ids),
            ("detox".to_string(), detox_ids),
            ("decontaminate".to_string(), decon_ids),
            ("final_filter".to_string(), filter_ids),
        ]),
    };
    debug_assert!(report.reconciles());
    Ok((output, report))
}
