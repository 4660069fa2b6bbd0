//! Seeded simulated models.
//!
//! A [`SimModel`] answers correctly with probability
//! `logistic(s0 + eta · ln(1 + d))` where `d` is the data it has received for
//! the label. Draws are common random numbers: the uniform for response `i`
//! of a record depends only on the seed, the skill's noise seed, the record id
//! and `i`, so two models that differ only in skill never disagree in the
//! "wrong" direction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::{LoopEvaluator, Synthesizer};
use crate::corpus::{Corpus, Record};
use crate::label::{LabelCatalog, LabelKey};
use crate::seed;
use crate::weights::{Response, ResponseModel};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("model {model} has no skill for label {label}")]
    UnknownLabel { model: String, label: LabelKey },
    #[error("negative data amount {amount} for label {label}")]
    NegativeAmount { label: LabelKey, amount: f64 },
    #[error("invalid skill for label {label}: {message}")]
    InvalidSkill { label: LabelKey, message: String },
    #[error("scenario {path}: {message}")]
    Scenario { path: String, message: String },
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`logistic`]; `p` must lie in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSkill {
    pub label: LabelKey,
    /// Base log-odds.
    pub s0: f64,
    /// Log-odds gained per unit of `ln(1 + d)`; never negative.
    pub eta: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

impl SimSkill {
    pub fn new(label: LabelKey, s0: f64, eta: f64) -> Self {
        Self {
            label,
            s0,
            eta,
            noise_seed: 0,
        }
    }

    fn check(&self) -> Result<(), SimError> {
        let bad = |message: &str| SimError::InvalidSkill {
            label: self.label.clone(),
            message: message.to_string(),
        };
        if !self.s0.is_finite() {
            return Err(bad("s0 must be finite"));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(bad("eta must be a finite nonnegative number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimModel {
    pub model_id: String,
    pub skills: BTreeMap<LabelKey, SimSkill>,
    pub d_seen: BTreeMap<LabelKey, f64>,
}

impl SimModel {
    pub fn new(model_id: impl Into<String>, skills: impl IntoIterator<Item = SimSkill>) -> Result<Self, SimError> {
        let mut map = BTreeMap::new();
        for skill in skills {
            skill.check()?;
            map.insert(skill.label.clone(), skill);
        }
        Ok(Self {
            model_id: model_id.into(),
            d_seen: map.keys().map(|k| (k.clone(), 0.0)).collect(),
            skills: map,
        })
    }

    fn skill(&self, label: &LabelKey) -> Result<&SimSkill, SimError> {
        self.skills.get(label).ok_or_else(|| SimError::UnknownLabel {
            model: self.model_id.clone(),
            label: label.clone(),
        })
    }

    pub fn probability(&self, label: &LabelKey) -> Result<f64, SimError> {
        let skill = self.skill(label)?;
        let d = self.d_seen.get(label).copied().unwrap_or(0.0);
        Ok(logistic(skill.s0 + skill.eta * d.ln_1p()))
    }

    /// `d_seen[label] += amount`.
    pub fn feed_data(&mut self, label: &LabelKey, amount: f64) -> Result<(), SimError> {
        self.skill(label)?;
        if !(amount >= 0.0) {
            return Err(SimError::NegativeAmount {
                label: label.clone(),
                amount,
            });
        }
        *self.d_seen.entry(label.clone()).or_insert(0.0) += amount;
        Ok(())
    }

    /// Replaces the data seen for `label` (used when data is reverted).
    pub fn set_data(&mut self, label: &LabelKey, amount: f64) -> Result<(), SimError> {
        self.skill(label)?;
        if !(amount >= 0.0) {
            return Err(SimError::NegativeAmount {
                label: label.clone(),
                amount,
            });
        }
        self.d_seen.insert(label.clone(), amount);
        Ok(())
    }

    /// Uniform draw for response `index` of instance `instance_id`.
    fn draw(&self, skill: &SimSkill, instance_id: &str, index: usize, seed: u64) -> f64 {
        let base = seed::derive(seed ^ skill.noise_seed, instance_id);
        seed::unit_f64(seed::mix64(base.wrapping_add(index as u64)))
    }

    pub fn respond_to(
        &self,
        label: &LabelKey,
        instance_id: &str,
        k: usize,
        seed: u64,
    ) -> Result<Vec<Response>, SimError> {
        let skill = self.skill(label)?;
        let p = self.probability(label)?;
        Ok((0..k)
            .map(|i| Response {
                text: format!("OK-{i}"),
                correct: self.draw(skill, instance_id, i, seed) < p,
            })
            .collect())
    }

    /// Empirical pass@1 over `instances` synthetic instances of `label`.
    pub fn measure_pass1(&self, label: &LabelKey, instances: usize, seed: u64) -> Result<f64, SimError> {
        let skill = self.skill(label)?;
        if instances == 0 {
            return self.probability(label);
        }
        let p = self.probability(label)?;
        let label_seed = seed::derive(seed, &label.to_string());
        let hits = (0..instances)
            .filter(|i| self.draw(skill, &format!("sim#{i}"), 0, label_seed) < p)
            .count();
        Ok(hits as f64 / instances as f64)
    }
}

impl ResponseModel for SimModel {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn respond(&self, record: &Record, count: usize, seed: u64) -> Result<Vec<Response>, String> {
        self.respond_to(&record.label, &record.id, count, seed)
            .map_err(|e| e.to_string())
    }
}

/// Scripted model: for each label, the first `round(pass · count)` records of
/// that label (by id) always answer correctly and the rest never do.
#[derive(Debug, Clone, PartialEq)]
pub struct QuotaModel {
    pub model_id: String,
    correct: BTreeSet<String>,
    known: BTreeSet<LabelKey>,
}

impl QuotaModel {
    pub fn new(model_id: impl Into<String>, corpus: &Corpus, pass: &BTreeMap<LabelKey, f64>) -> Result<Self, SimError> {
        let mut correct = BTreeSet::new();
        for (label, &p) in pass {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidSkill {
                    label: label.clone(),
                    message: format!("pass rate {p} outside [0, 1]"),
                });
            }
            let mut ids: Vec<&str> = corpus
                .records()
                .iter()
                .filter(|r| &r.label == label)
                .map(|r| r.id.as_str())
                .collect();
            ids.sort_unstable();
            let quota = (p * ids.len() as f64).round() as usize;
            correct.extend(ids.into_iter().take(quota).map(str::to_string));
        }
        Ok(Self {
            model_id: model_id.into(),
            correct,
            known: pass.keys().cloned().collect(),
        })
    }
}

impl ResponseModel for QuotaModel {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn respond(&self, record: &Record, count: usize, _seed: u64) -> Result<Vec<Response>, String> {
        if !self.known.contains(&record.label) {
            return Err(format!(
                "model {} has no pass rate for label {}",
                self.model_id, record.label
            ));
        }
        let ok = self.correct.contains(&record.id);
        Ok((0..count)
            .map(|i| Response {
                text: format!("OK-{i}"),
                correct: ok,
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Measurement {
    /// Report the model probability itself.
    #[default]
    Exact,
    /// Report empirical pass@1 over `eval_instances` seeded instances.
    Sampled,
}

/// "Train on `d` then evaluate" backed by a [`SimModel`].
#[derive(Debug, Clone)]
pub struct SimLoopEvaluator {
    pub model: SimModel,
    pub measurement: Measurement,
    pub instances: usize,
    pub seed: u64,
}

impl LoopEvaluator for SimLoopEvaluator {
    fn evaluate(&mut self, data: &BTreeMap<LabelKey, f64>) -> Result<BTreeMap<LabelKey, f64>, String> {
        data.iter()
            .map(|(label, &d)| {
                self.model.set_data(label, d).map_err(|e| e.to_string())?;
                let p = match self.measurement {
                    Measurement::Exact => self.model.probability(label),
                    Measurement::Sampled => self.model.measure_pass1(label, self.instances, self.seed),
                }
                .map_err(|e| e.to_string())?;
                Ok((label.clone(), p))
            })
            .collect()
    }
}

/// Synthesizer stand-in that produces up to `capacity` items per request and
/// records what was asked of it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimSynthesizer {
    pub capacity: Option<u64>,
    pub produced: BTreeMap<LabelKey, u64>,
    pub regenerations: Vec<LabelKey>,
}

impl SimSynthesizer {
    pub fn new(capacity: Option<u64>) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }
}

impl Synthesizer for SimSynthesizer {
    fn synthesize(&mut self, label: &LabelKey, items: u64, regenerate: bool) -> Result<u64, String> {
        if regenerate {
            self.regenerations.push(label.clone());
        }
        let made = self.capacity.map_or(items, |c| items.min(c));
        *self.produced.entry(label.clone()).or_insert(0) += made;
        Ok(made)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelRole {
    Current,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[default]
    Logistic,
    Quota,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSkill {
    pub label: LabelKey,
    #[serde(default)]
    pub s0: Option<f64>,
    #[serde(default)]
    pub eta: f64,
    /// Starting pass probability; for logistic models an alternative to `s0`.
    #[serde(default)]
    pub pass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioModel {
    pub id: String,
    pub role: ModelRole,
    #[serde(default)]
    pub kind: ModelKind,
    #[serde(default)]
    pub noise_seed: u64,
    pub skills: Vec<ScenarioSkill>,
}

/// Simulation scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub measurement: Measurement,
    #[serde(default = "default_eval_instances")]
    pub eval_instances: usize,
    /// Data each label starts the attribution loop with.
    #[serde(default)]
    pub initial_data: f64,
    /// Per-request synthesizer cap; unlimited when absent.
    #[serde(default)]
    pub synth_capacity: Option<u64>,
    pub models: Vec<ScenarioModel>,
}

fn default_eval_instances() -> usize {
    1000
}

impl Scenario {
    pub fn from_toml_str(text: &str, path: &str) -> Result<Self, SimError> {
        let scenario: Self = toml::from_str(text).map_err(|e| SimError::Scenario {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        scenario.check(path)?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Scenario {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    fn check(&self, path: &str) -> Result<(), SimError> {
        let err = |message: String| SimError::Scenario {
            path: path.to_string(),
            message,
        };
        let currents = self.models.iter().filter(|m| m.role == ModelRole::Current).count();
        if currents != 1 {
            return Err(err(format!("expected exactly one current model, found {currents}")));
        }
        let mut ids = BTreeSet::new();
        for m in &self.models {
            if !ids.insert(&m.id) {
                return Err(err(format!("duplicate model id {}", m.id)));
            }
            for s in &m.skills {
                let ok = match m.kind {
                    ModelKind::Logistic => s.s0.is_some() != s.pass.is_some(),
                    ModelKind::Quota => s.pass.is_some() && s.s0.is_none(),
                };
                if !ok {
                    return Err(err(format!(
                        "model {} label {}: logistic skills need exactly one of s0 or pass; quota skills need pass",
                        m.id, s.label
                    )));
                }
                if let Some(p) = s.pass {
                    let open = m.kind == ModelKind::Logistic;
                    if (open && !(p > 0.0 && p < 1.0)) || !(0.0..=1.0).contains(&p) {
                        return Err(err(format!("model {} label {}: pass {p} out of range", m.id, s.label)));
                    }
                }
            }
        }
        if !(self.initial_data >= 0.0) {
            return Err(err("initial_data must be nonnegative".into()));
        }
        Ok(())
    }

    /// Labels the current model has skills for.
    pub fn labels(&self) -> Vec<LabelKey> {
        let mut labels: Vec<LabelKey> = self.current().skills.iter().map(|s| s.label.clone()).collect();
        labels.sort();
        labels
    }

    pub fn current(&self) -> &ScenarioModel {
        self.models
            .iter()
            .find(|m| m.role == ModelRole::Current)
            .expect("checked on load")
    }

    pub fn references(&self) -> impl Iterator<Item = &ScenarioModel> {
        self.models.iter().filter(|m| m.role == ModelRole::Reference)
    }

    /// Every skill label must be in the catalog.
    pub fn check_catalog(&self, catalog: &LabelCatalog) -> Result<(), SimError> {
        for m in &self.models {
            for s in &m.skills {
                if !catalog.validate_label(&s.label) {
                    return Err(SimError::Scenario {
                        path: String::new(),
                        message: format!("model {} uses label {} not in the catalog", m.id, s.label),
                    });
                }
            }
        }
        Ok(())
    }
}

impl ScenarioModel {
    pub fn to_sim(&self) -> Result<SimModel, SimError> {
        if self.kind != ModelKind::Logistic {
            return Err(SimError::Scenario {
                path: String::new(),
                message: format!("model {} is not a logistic model", self.id),
            });
        }
        let skills = self.skills.iter().map(|s| SimSkill {
            label: s.label.clone(),
            s0: s.s0.unwrap_or_else(|| logit(s.pass.expect("checked on load"))),
            eta: s.eta,
            noise_seed: self.noise_seed,
        });
        SimModel::new(self.id.clone(), skills)
    }

    /// Builds a response model of whichever kind the scenario declares.
    pub fn to_response_model(&self, corpus: &Corpus) -> Result<Box<dyn ResponseModel>, SimError> {
        match self.kind {
            ModelKind::Logistic => Ok(Box::new(self.to_sim()?)),
            ModelKind::Quota => {
                let pass = self
                    .skills
                    .iter()
                    .map(|s| (s.label.clone(), s.pass.expect("checked on load")))
                    .collect();
                Ok(Box::new(QuotaModel::new(self.id.clone(), corpus, &pass)?))
            }
        }
    }
}
