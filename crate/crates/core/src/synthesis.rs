//! Dual-track synthesis over injected agents.
//!
//! Track I pairs knowledge units with the labels they hint at and asks a
//! [`GenerationAgent`] for one triplet per pairing. Track II repeatedly hands
//! an instruction set plus feedback to an [`EvolutionAgent`] until the new
//! instructions stop being novel or the iteration bound is hit. The
//! orchestrator measures and filters; evolution strategies live in agents.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, Provenance, Record};
use crate::label::{LabelCatalog, LabelKey};
use crate::verification::{sim, tokenize, SimilarityConfig};

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error("no knowledge units supplied")]
    NoKnowledge,
    #[error("label {0} is not in the catalog")]
    InvalidLabel(LabelKey),
    #[error("every generation request failed ({0} attempted)")]
    AllFailed(usize),
    #[error("seed instruction set is empty")]
    NoSeeds,
    #[error("k_max must be at least 1")]
    ZeroIterations,
    #[error("evolution agent failed at step {step}: {message}")]
    AgentFailed { step: usize, message: String },
    #[error("evolution agent returned an empty instruction set at step {0}")]
    EmptyEvolution(usize),
    #[error("evolution agent returned a blank instruction at step {0}")]
    BlankInstruction(usize),
    #[error("invalid feedback: {0}")]
    Feedback(String),
    #[error("record id {0:?} appears in both tracks")]
    IdCollision(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeUnit {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub label_hints: Vec<LabelKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub query: String,
    #[serde(default)]
    pub thinking: String,
    pub answer: String,
}

pub trait GenerationAgent: Send + Sync {
    fn generate(&self, unit: &KnowledgeUnit, label: &LabelKey) -> Result<Triplet, String>;
}

pub trait EvolutionAgent {
    fn evolve(&mut self, instructions: &[String], feedback: &EvolutionFeedback) -> Result<Vec<String>, String>;
}

/// Answers one instruction with a reasoning triplet (the base model of the
/// evolution track).
pub trait InstructionResponder: Send + Sync {
    fn respond(&self, instruction: &str, label: &LabelKey) -> Result<Triplet, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionFeedback {
    pub diversity: f64,
    pub novelty: f64,
    pub answerable: Vec<bool>,
}

impl EvolutionFeedback {
    fn check(&self, expected_len: usize) -> Result<(), SynthesisError> {
        for (name, v) in [("diversity", self.diversity), ("novelty", self.novelty)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthesisError::Feedback(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.answerable.len() != expected_len {
            return Err(SynthesisError::Feedback(format!(
                "{} answerability flags for {expected_len} instructions",
                self.answerable.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedItem {
    pub knowledge_id: String,
    pub label: LabelKey,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Track1Output {
    pub corpus: Corpus,
    pub skipped: Vec<SkippedItem>,
}

pub fn task_record_id(unit_id: &str, label: &LabelKey) -> String {
    format!("task:{unit_id}:{label}")
}

/// Knowledge-guided generation: one candidate per (unit, hinted label) pair
/// restricted to `labels`. Pairs are processed in parallel; output order is
/// knowledge order, then label order.
pub fn run_track1(
    knowledge: &[KnowledgeUnit],
    labels: &[LabelKey],
    catalog: &LabelCatalog,
    agent: &dyn GenerationAgent,
) -> Result<Track1Output, SynthesisError> {
    if knowledge.is_empty() {
        return Err(SynthesisError::NoKnowledge);
    }
    if let Some(bad) = labels.iter().find(|l| !catalog.validate_label(l)) {
        return Err(SynthesisError::InvalidLabel(bad.clone()));
    }
    let pairs: Vec<(&KnowledgeUnit, &LabelKey)> = knowledge
        .iter()
        .flat_map(|unit| {
            labels
                .iter()
                .filter(move |label| unit.label_hints.contains(label))
                .map(move |label| (unit, label))
        })
        .collect();
    if pairs.is_empty() {
        return Ok(Track1Output {
            corpus: Corpus::empty(),
            skipped: Vec::new(),
        });
    }
    let results: Vec<Result<Record, SkippedItem>> = pairs
        .par_iter()
        .map(|&(unit, label)| {
            let skip = |reason: String| SkippedItem {
                knowledge_id: unit.id.clone(),
                label: label.clone(),
                reason,
            };
            let triplet = agent.generate(unit, label).map_err(skip)?;
            let record = Record::new(
                task_record_id(&unit.id, label),
                label.clone(),
                triplet.query,
                triplet.thinking,
                triplet.answer,
                Provenance::TaskTrack,
            );
            record.check().map_err(skip)?;
            Ok(record)
        })
        .collect();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for result in results {
        match result {
            Ok(record) => records.push(record),
            Err(item) => {
                log::warn!(
                    "track I skipped knowledge {} for {}: {}",
                    item.knowledge_id,
                    item.label,
                    item.reason
                );
                skipped.push(item);
            }
        }
    }
    if records.is_empty() {
        return Err(SynthesisError::AllFailed(pairs.len()));
    }
    Ok(Track1Output {
        corpus: Corpus::from_records(records)?,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Track2Output {
    pub instructions: Vec<String>,
    /// Evolution steps performed.
    pub steps: usize,
    /// Mean novelty of the new instructions produced by each step.
    pub novelty_trace: Vec<f64>,
    pub removed_unanswerable: usize,
    pub converged: bool,
}

/// 1 − max similarity to any earlier instruction.
pub fn novelty(instruction: &str, prior: &[String], cfg: &SimilarityConfig) -> f64 {
    let max_sim = prior.iter().map(|p| sim(instruction, p, cfg)).fold(0.0_f64, f64::max);
    1.0 - max_sim
}

/// Feedback-driven instruction evolution.
///
/// Step `k` computes `R_k = feedback_fn(I_k)` and calls the agent for
/// `I_{k+1}`. Instructions in `I_{k+1}` never seen before count as new; the
/// step's improvement is their mean [`novelty`] against everything seen so
/// far (0 when nothing new appeared). The loop stops when the improvement
/// falls below `convergence_eps` or after `k_max` steps. The final set is
/// filtered by the answerability flags of one last feedback call.
pub fn run_track2(
    seeds: &[String],
    agent: &mut dyn EvolutionAgent,
    feedback_fn: &dyn Fn(&[String]) -> EvolutionFeedback,
    k_max: usize,
    convergence_eps: f64,
    cfg: &SimilarityConfig,
) -> Result<Track2Output, SynthesisError> {
    if seeds.is_empty() {
        return Err(SynthesisError::NoSeeds);
    }
    if k_max == 0 {
        return Err(SynthesisError::ZeroIterations);
    }
    let mut current: Vec<String> = seeds.to_vec();
    let mut history: Vec<String> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for s in seeds {
        if seen.insert(s.clone()) {
            history.push(s.clone());
        }
    }
    let mut novelty_trace = Vec::new();
    let mut converged = false;
    let mut steps = 0;
    while steps < k_max {
        steps += 1;
        let feedback = feedback_fn(&current);
        feedback.check(current.len())?;
        let next = agent
            .evolve(&current, &feedback)
            .map_err(|message| SynthesisError::AgentFailed { step: steps, message })?;
        if next.is_empty() {
            return Err(SynthesisError::EmptyEvolution(steps));
        }
        if next.iter().any(|i| i.trim().is_empty()) {
            return Err(SynthesisError::BlankInstruction(steps));
        }
        let mut fresh: Vec<&String> = Vec::new();
        for instruction in &next {
            if !seen.contains(instruction) && !fresh.contains(&instruction) {
                fresh.push(instruction);
            }
        }
        // Novelty is scored against the history as it stood before this step,
        // in sorted order so agent output order cannot change the result.
        fresh.sort();
        let improvement = if fresh.is_empty() {
            0.0
        } else {
            fresh.iter().map(|i| novelty(i, &history, cfg)).sum::<f64>() / fresh.len() as f64
        };
        novelty_trace.push(improvement);
        for instruction in fresh {
            seen.insert(instruction.clone());
            history.push(instruction.clone());
        }
        current = next;
        if improvement < convergence_eps {
            converged = true;
            break;
        }
    }
    let final_feedback = feedback_fn(&current);
    final_feedback.check(current.len())?;
    let before = current.len();
    let instructions: Vec<String> = current
        .into_iter()
        .zip(&final_feedback.answerable)
        .filter_map(|(i, &ok)| ok.then_some(i))
        .collect();
    Ok(Track2Output {
        removed_unanswerable: before - instructions.len(),
        instructions,
        steps,
        novelty_trace,
        converged,
    })
}

/// Default feedback: diversity is 1 − mean pairwise similarity, novelty is
/// 1 − mean nearest-neighbour similarity within the set, and an instruction
/// is answerable when it has at least three words.
pub fn default_feedback(instructions: &[String], cfg: &SimilarityConfig) -> EvolutionFeedback {
    let n = instructions.len();
    let (diversity, novelty) = if n < 2 {
        (1.0, 1.0)
    } else {
        let mut pair_total = 0.0;
        let mut nearest_total = 0.0;
        for i in 0..n {
            let mut nearest = 0.0_f64;
            for j in 0..n {
                if i != j {
                    let s = sim(&instructions[i], &instructions[j], cfg);
                    pair_total += s;
                    nearest = nearest.max(s);
                }
            }
            nearest_total += nearest;
        }
        (1.0 - pair_total / (n * (n - 1)) as f64, 1.0 - nearest_total / n as f64)
    };
    EvolutionFeedback {
        diversity: diversity.clamp(0.0, 1.0),
        novelty: novelty.clamp(0.0, 1.0),
        answerable: instructions.iter().map(|i| tokenize(i).count() >= 3).collect(),
    }
}

pub fn evolution_record_id(index: usize) -> String {
    format!("evo:{index}")
}

/// Turns evolved instructions into evolution-track records for `label`.
pub fn materialize_evolution(
    instructions: &[String],
    label: &LabelKey,
    responder: &dyn InstructionResponder,
) -> Result<(Corpus, Vec<String>), SynthesisError> {
    let results: Vec<Result<Record, String>> = instructions
        .par_iter()
        .enumerate()
        .map(|(i, instruction)| {
            let t = responder.respond(instruction, label)?;
            let record = Record::new(
                evolution_record_id(i),
                label.clone(),
                t.query,
                t.thinking,
                t.answer,
                Provenance::EvolutionTrack,
            );
            record.check()?;
            Ok(record)
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(record) => records.push(record),
            Err(reason) => {
                log::warn!("evolution instruction {i} not materialized: {reason}");
                failures.push(format!("{}: {reason}", evolution_record_id(i)));
            }
        }
    }
    Ok((Corpus::from_records(records)?, failures))
}

/// `D_task ∪ D_evolution`, task records first.
pub fn merge_tracks(task: &Corpus, evolution: &Corpus) -> Result<Corpus, SynthesisError> {
    let task_ids: BTreeSet<&str> = task.records().iter().map(|r| r.id.as_str()).collect();
    if let Some(clash) = evolution.records().iter().find(|r| task_ids.contains(r.id.as_str())) {
        return Err(SynthesisError::IdCollision(clash.id.clone()));
    }
    let mut records = task.records().to_vec();
    records.extend_from_slice(evolution.records());
    Ok(Corpus::from_records(records)?)
}

/// Deterministic template generator. The answer is the knowledge text's first
/// sentence, and the thinking restates the text before concluding with it.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateAgent;

fn first_sentence(text: &str) -> &str {
    let trimmed = text.trim();
    let end = trimmed.find(['.', '?', '!', '\n']).unwrap_or(trimmed.len());
    trimmed[..end].trim()
}

impl GenerationAgent for TemplateAgent {
    fn generate(&self, unit: &KnowledgeUnit, label: &LabelKey) -> Result<Triplet, String> {
        let answer = first_sentence(&unit.text);
        if answer.is_empty() {
            return Err(format!("knowledge {} has no usable sentence", unit.id));
        }
        Ok(Triplet {
            query: format!(
                "[{} / {}] What is the key statement of the following material? {}",
                label.scene(),
                label.attribute(),
                unit.text.trim()
            ),
            thinking: format!(
                "The material reads: {}. The leading statement carries the point, so the answer is {}.",
                unit.text.trim().trim_end_matches('.'),
                answer
            ),
            answer: answer.to_string(),
        })
    }
}

/// Progressive-complexity evolution: each step appends one harder variant of
/// a seed instruction, cycling through the seeds.
#[derive(Debug, Clone, Default)]
pub struct TemplateEvolutionAgent {
    step: usize,
}

const ESCALATIONS: [&str; 6] = [
    "Reason step by step and justify each intermediate figure",
    "Compare two alternative interpretations before concluding",
    "Identify the regulatory constraints that apply and check each one",
    "State the assumptions explicitly then quantify their effect",
    "Decompose the problem into sub-questions and answer them in order",
    "List possible failure cases and verify the conclusion against them",
];

impl EvolutionAgent for TemplateEvolutionAgent {
    fn evolve(&mut self, instructions: &[String], _feedback: &EvolutionFeedback) -> Result<Vec<String>, String> {
        let base = &instructions[self.step % instructions.len()];
        let escalation = ESCALATIONS[self.step % ESCALATIONS.len()];
        self.step += 1;
        let mut next = instructions.to_vec();
        next.push(format!("{escalation} (round {}): {base}", self.step));
        Ok(next)
    }
}

/// Template responder for evolved instructions.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateResponder;

impl InstructionResponder for TemplateResponder {
    fn respond(&self, instruction: &str, _label: &LabelKey) -> Result<Triplet, String> {
        let answer = first_sentence(instruction.rsplit(':').next().unwrap_or(instruction));
        if answer.is_empty() {
            return Err("instruction has no answerable core".into());
        }
        Ok(Triplet {
            query: instruction.to_string(),
            thinking: format!("Working through the request: {instruction}. Final: {answer}"),
            answer: answer.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::{Scene, TaskAttribute};

    fn catalog() -> LabelCatalog {
        LabelCatalog::new(
            vec![Scene {
                id: "banking".into(),
                display_name: "Banking".into(),
            }],
            vec![
                TaskAttribute {
                    id: "ner".into(),
                    display_name: "NER".into(),
                },
                TaskAttribute {
                    id: "qa".into(),
                    display_name: "QA".into(),
                },
            ],
            vec!["banking/ner".parse().unwrap(), "banking/qa".parse().unwrap()],
        )
        .unwrap()
    }

    fn unit(id: &str, hint: &str) -> KnowledgeUnit {
        KnowledgeUnit {
            id: id.into(),
            text: format!("Fact number {id}. More detail."),
            label_hints: vec![hint.parse().unwrap()],
        }
    }

    struct FailOn(&'static str);
    impl GenerationAgent for FailOn {
        fn generate(&self, unit: &KnowledgeUnit, label: &LabelKey) -> Result<Triplet, String> {
            if unit.id == self.0 {
                Err("scripted failure".into())
            } else {
                TemplateAgent.generate(unit, label)
            }
        }
    }

    #[test]
    fn track1_one_record_per_match() {
        let ner: LabelKey = "banking/ner".parse().unwrap();
        let out = run_track1(
            &[unit("1", "banking/ner"), unit("2", "banking/ner")],
            std::slice::from_ref(&ner),
            &catalog(),
            &TemplateAgent,
        )
        .unwrap();
        assert_eq!(out.corpus.len(), 2);
        assert!(out
            .corpus
            .records()
            .iter()
            .all(|r| r.label == ner && r.provenance == Provenance::TaskTrack));
    }

    #[test]
    fn track1_unmatched_unit_contributes_nothing() {
        let ner: LabelKey = "banking/ner".parse().unwrap();
        let out = run_track1(
            &[unit("1", "banking/ner"), unit("2", "banking/qa")],
            &[ner],
            &catalog(),
            &TemplateAgent,
        )
        .unwrap();
        assert_eq!(out.corpus.len(), 1);
    }

    #[test]
    fn track1_skips_failures() {
        let ner: LabelKey = "banking/ner".parse().unwrap();
        let units = [
            unit("1", "banking/ner"),
            unit("2", "banking/ner"),
            unit("3", "banking/ner"),
        ];
        let out = run_track1(&units, std::slice::from_ref(&ner), &catalog(), &FailOn("2")).unwrap();
        assert_eq!(out.corpus.len(), 2);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].knowledge_id, "2");
        let all_fail = run_track1(&units[1..2], &[ner], &catalog(), &FailOn("2"));
        assert!(matches!(all_fail, Err(SynthesisError::AllFailed(1))));
    }

    #[test]
    fn track1_rejects_bad_input() {
        let bad: LabelKey = "banking/summary".parse().unwrap();
        assert!(matches!(
            run_track1(&[unit("1", "banking/ner")], &[bad], &catalog(), &TemplateAgent),
            Err(SynthesisError::InvalidLabel(_))
        ));
        assert!(matches!(
            run_track1(&[], &[], &catalog(), &TemplateAgent),
            Err(SynthesisError::NoKnowledge)
        ));
    }

    struct Identity;
    impl EvolutionAgent for Identity {
        fn evolve(&mut self, i: &[String], _f: &EvolutionFeedback) -> Result<Vec<String>, String> {
            Ok(i.to_vec())
        }
    }

    struct AddOne(usize);
    impl EvolutionAgent for AddOne {
        fn evolve(&mut self, i: &[String], _f: &EvolutionFeedback) -> Result<Vec<String>, String> {
            self.0 += 1;
            let mut next = i.to_vec();
            next.push(format!("novel{0} distinct{0} words{0} here{0}", self.0));
            Ok(next)
        }
    }

    fn seeds() -> Vec<String> {
        vec!["assess the loan risk".into(), "summarize the policy terms".into()]
    }

    fn fb(i: &[String]) -> EvolutionFeedback {
        default_feedback(i, &SimilarityConfig::default())
    }

    #[test]
    fn track2_k_max_one_runs_one_step() {
        let out = run_track2(&seeds(), &mut AddOne(0), &fb, 1, 0.01, &SimilarityConfig::default()).unwrap();
        assert_eq!(out.steps, 1);
        let out = run_track2(&seeds(), &mut Identity, &fb, 1, 0.01, &SimilarityConfig::default()).unwrap();
        assert_eq!(out.steps, 1);
    }

    #[test]
    fn track2_identity_stops_at_fixed_point() {
        let out = run_track2(&seeds(), &mut Identity, &fb, 10, 0.01, &SimilarityConfig::default()).unwrap();
        // I_1 (seeds) → I_2 = I_1 with zero novelty: stop once I_2 exists.
        assert_eq!(out.steps, 1);
        assert_eq!(out.steps + 1, 2);
        assert!(out.converged);
        assert_eq!(out.novelty_trace, vec![0.0]);
        assert_eq!(out.instructions, seeds());
    }

    #[test]
    fn track2_scripted_growth() {
        let out = run_track2(&seeds(), &mut AddOne(0), &fb, 5, 0.01, &SimilarityConfig::default()).unwrap();
        assert_eq!(out.steps, 5);
        assert_eq!(out.instructions.len(), seeds().len() + 5);
        // hand simulation: each added instruction shares no word with anything before it
        assert_eq!(out.novelty_trace, vec![1.0; 5]);
        assert!(!out.converged);
    }

    #[test]
    fn track2_filters_unanswerable() {
        let mut s = seeds();
        s.push("why".into());
        let out = run_track2(&s, &mut Identity, &fb, 3, 0.01, &SimilarityConfig::default()).unwrap();
        assert_eq!(out.removed_unanswerable, 1);
        assert_eq!(out.instructions, seeds());
    }

    struct Empty;
    impl EvolutionAgent for Empty {
        fn evolve(&mut self, _i: &[String], _f: &EvolutionFeedback) -> Result<Vec<String>, String> {
            Ok(vec![])
        }
    }

    #[test]
    fn track2_errors() {
        let cfg = SimilarityConfig::default();
        assert!(matches!(
            run_track2(&[], &mut Identity, &fb, 3, 0.01, &cfg),
            Err(SynthesisError::NoSeeds)
        ));
        assert!(matches!(
            run_track2(&seeds(), &mut Empty, &fb, 3, 0.01, &cfg),
            Err(SynthesisError::EmptyEvolution(1))
        ));
        assert!(matches!(
            run_track2(&seeds(), &mut Identity, &fb, 0, 0.01, &cfg),
            Err(SynthesisError::ZeroIterations)
        ));
        let bad_fb = |i: &[String]| EvolutionFeedback {
            diversity: 2.0,
            novelty: 0.0,
            answerable: vec![true; i.len()],
        };
        assert!(matches!(
            run_track2(&seeds(), &mut Identity, &bad_fb, 3, 0.01, &cfg),
            Err(SynthesisError::Feedback(_))
        ));
    }

    #[test]
    fn track2_template_agent_is_reproducible() {
        let cfg = SimilarityConfig::default();
        let a = run_track2(&seeds(), &mut TemplateEvolutionAgent::default(), &fb, 4, 0.01, &cfg).unwrap();
        let b = run_track2(&seeds(), &mut TemplateEvolutionAgent::default(), &fb, 4, 0.01, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps, 4);
    }

    fn corpus(ids: &[&str]) -> Corpus {
        Corpus::from_records(
            ids.iter()
                .map(|id| Record::new(*id, "banking/ner".parse().unwrap(), "q", "", "a", Provenance::External))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn merge_examples() {
        let merged = merge_tracks(&corpus(&["a", "b", "c"]), &corpus(&["d", "e", "f", "g"])).unwrap();
        assert_eq!(merged.len(), 7);
        let task = corpus(&["a", "b", "c"]);
        assert_eq!(merge_tracks(&task, &Corpus::empty()).unwrap(), task);
        let err = merge_tracks(&corpus(&["x"]), &corpus(&["x"])).unwrap_err();
        assert!(err.to_string().contains("\"x\""));
    }

    #[test]
    fn materialize_assigns_evolution_provenance() {
        let label: LabelKey = "banking/qa".parse().unwrap();
        let (c, failures) = materialize_evolution(&seeds(), &label, &TemplateResponder).unwrap();
        assert!(failures.is_empty());
        assert_eq!(c.len(), 2);
        assert!(c.records().iter().all(|r| r.provenance == Provenance::EvolutionTrack));
    }
}
