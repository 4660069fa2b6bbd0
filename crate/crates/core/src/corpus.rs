//! Reasoning-triplet records, line-delimited persistence and per-label
//! sampling.
//!
//! Record files hold one JSON object per line:
//!
//! ```text
//! {"id":"r1","label":"banking/ner","query":"...","thinking":"...","answer":"...","provenance":"task-track"}
//! ```
//!
//! `verify_flag`, `clean_flag` and `quality_score` are omitted when unset.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::label::{LabelCatalog, LabelKey};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate record id {id:?} on lines {first} and {second}")]
    DuplicateId { id: String, first: usize, second: usize },
    #[error("duplicate record id {0:?}")]
    DuplicateRecord(String),
    #[error("line {line}: record {id:?} has label {label} which is not in the catalog")]
    InvalidLabel { line: usize, id: String, label: LabelKey },
    #[error("record {0:?}: {1}")]
    InvalidRecord(String, String),
    #[error("label {0} has no records in the corpus")]
    EmptyLabel(LabelKey),
    #[error("sample size must be at least 1")]
    ZeroSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    TaskTrack,
    EvolutionTrack,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub label: LabelKey,
    pub query: String,
    #[serde(default)]
    pub thinking: String,
    pub answer: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_flag: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_flag: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_score: Option<f64>,
}

impl Record {
    pub fn new(
        id: impl Into<String>,
        label: LabelKey,
        query: impl Into<String>,
        thinking: impl Into<String>,
        answer: impl Into<String>,
        provenance: Provenance,
    ) -> Self {
        Self {
            id: id.into(),
            label,
            query: query.into(),
            thinking: thinking.into(),
            answer: answer.into(),
            provenance,
            verify_flag: None,
            clean_flag: None,
            quality_score: None,
        }
    }

    /// Field-level checks that do not need a catalog.
    pub fn check(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.query.trim().is_empty() {
            return Err("empty query".into());
        }
        if self.answer.trim().is_empty() {
            return Err("empty answer".into());
        }
        if let Some(score) = self.quality_score {
            if !(0.0..=1.0).contains(&score) {
                return Err(format!("quality_score {score} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Query, thinking and answer in that order.
    pub fn fields(&self) -> [&str; 3] {
        [&self.query, &self.thinking, &self.answer]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    records: Vec<Record>,
    pub source_path: Option<PathBuf>,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate ids and malformed records. Labels
    /// are checked separately with [`Corpus::check_labels`].
    pub fn from_records(records: Vec<Record>) -> Result<Self, CorpusError> {
        let mut seen = HashMap::with_capacity(records.len());
        for record in &records {
            record
                .check()
                .map_err(|m| CorpusError::InvalidRecord(record.id.clone(), m))?;
            if seen.insert(record.id.as_str(), ()).is_some() {
                return Err(CorpusError::DuplicateRecord(record.id.clone()));
            }
        }
        Ok(Self {
            records,
            source_path: None,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn into_records(self) -> Vec<Record> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn check_labels(&self, catalog: &LabelCatalog) -> Result<(), CorpusError> {
        for (i, record) in self.records.iter().enumerate() {
            if !catalog.validate_label(&record.label) {
                return Err(CorpusError::InvalidLabel {
                    line: i + 1,
                    id: record.id.clone(),
                    label: record.label.clone(),
                });
            }
        }
        Ok(())
    }

    /// Records that carry `label`, in corpus order.
    pub fn by_label<'a>(&'a self, label: &'a LabelKey) -> impl Iterator<Item = &'a Record> + 'a {
        self.records.iter().filter(move |r| &r.label == label)
    }

    /// Distinct labels present, in key order.
    pub fn labels(&self) -> Vec<LabelKey> {
        label_histogram(self).into_keys().collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Parses line-delimited records. Blank lines are skipped but still counted
/// for line numbers.
pub fn parse_records(text: &str) -> Result<Vec<(usize, Record)>, CorpusError> {
    let mut out = Vec::new();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        record
            .check()
            .map_err(|message| CorpusError::Malformed { line: line_no, message })?;
        if let Some(&first) = first_seen.get(&record.id) {
            return Err(CorpusError::DuplicateId {
                id: record.id,
                first,
                second: line_no,
            });
        }
        first_seen.insert(record.id.clone(), line_no);
        out.push((line_no, record));
    }
    Ok(out)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<(usize, Record)>, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(io_err)?);
        text.push('\n');
    }
    parse_records(&text)
}

pub fn load_corpus(path: impl AsRef<Path>, catalog: &LabelCatalog) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let parsed = read_records(path)?;
    let mut records = Vec::with_capacity(parsed.len());
    for (line, record) in parsed {
        if !catalog.validate_label(&record.label) {
            return Err(CorpusError::InvalidLabel {
                line,
                id: record.id,
                label: record.label,
            });
        }
        records.push(record);
    }
    Ok(Corpus {
        records,
        source_path: Some(path.to_path_buf()),
    })
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    writer.write_all(corpus.to_jsonl().as_bytes()).map_err(io_err)?;
    writer.flush().map_err(io_err)
}

/// Seeded draw of up to `n` records of `label` without replacement.
///
/// The label's records are taken in corpus order, permuted by a Fisher-Yates
/// shuffle driven by ChaCha8 seeded with `derive(seed, label)`, and the first
/// `min(n, count)` are returned.
pub fn stratified_sample<'a>(
    corpus: &'a Corpus,
    label: &LabelKey,
    n: usize,
    seed: u64,
) -> Result<Vec<&'a Record>, CorpusError> {
    if n == 0 {
        return Err(CorpusError::ZeroSample);
    }
    let mut members: Vec<&Record> = corpus.records.iter().filter(|r| &r.label == label).collect();
    if members.is_empty() {
        return Err(CorpusError::EmptyLabel(label.clone()));
    }
    let mut rng = seed::rng(seed::derive(seed, &label.to_string()));
    members.shuffle(&mut rng);
    members.truncate(n);
    Ok(members)
}

pub fn label_histogram(corpus: &Corpus) -> BTreeMap<LabelKey, usize> {
    let mut counts = BTreeMap::new();
    for record in corpus.records() {
        *counts.entry(record.label.clone()).or_insert(0) += 1;
    }
    counts
}
