//! Command implementations. Every command writes its artifacts plus a
//! resolved-config snapshot into the output directory; nothing written
//! depends on wall-clock time or thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use finforge_core::attribution::{
    self, AttributionError, Checkpoint, IterationReport, LoopResult, LoopState, StopReason,
};
use finforge_core::corpus::{self, Corpus, CorpusError, Record};
use finforge_core::governance::{
    self, ContaminationIndex, GovernanceError, GovernanceParams, GovernanceReport, Threshold,
};
use finforge_core::label::{self, CatalogError, LabelCatalog, LabelKey};
use finforge_core::protocol::{LineProcess, SubprocessEvaluator, SubprocessGenerationAgent, SubprocessJudge};
use finforge_core::seed;
use finforge_core::sim::{Scenario, SimError, SimLoopEvaluator, SimSynthesizer};
use finforge_core::synthesis::{
    self, GenerationAgent, KnowledgeUnit, SynthesisError, TemplateAgent, TemplateEvolutionAgent, TemplateResponder,
};
use finforge_core::verification::{
    self, Embedder, HashingEmbedder, Judge, LinearRating, ResponseSet, SimilarityConfig, SubstringJudge, VerifyError,
};
use finforge_core::weights::{self, ResponseModel, WeightError, WeightTable};
use serde::{Deserialize, Serialize};

use crate::config::{self, EmbedderKind, Loaded};
use crate::table::{f4, opt4, Table};
use crate::{Command, Failure, GlobalArgs, LabelsCommand, LoopCommand, LoopRunArgs};

pub const CHECKPOINT_FILE: &str = "loop_checkpoint.json";

pub fn dispatch(global: &GlobalArgs, command: Command) -> Result<(), Failure> {
    if let Command::Labels {
        action: LabelsCommand::Validate { catalog, corpus },
    } = &command
    {
        return labels_validate(global, catalog.as_deref(), corpus);
    }
    let loaded = need_config(global)?;
    init_threads(global.threads.unwrap_or(loaded.config.threads));
    match command {
        Command::Labels { .. } => unreachable!("handled above"),
        Command::Synthesize => synthesize(&loaded),
        Command::Verify { input, responses } => verify(&loaded, input.as_deref(), responses.as_deref()),
        Command::Govern { input, tau } => govern(&loaded, input.as_deref(), tau),
        Command::Weights { input, sim, previous } => {
            weights_cmd(&loaded, input.as_deref(), sim.as_deref(), previous.as_deref())
        }
        Command::Loop {
            action: LoopCommand::Run(args),
        } => loop_run(&loaded, &args),
        Command::Report => report(&loaded),
    }
}

fn need_config(global: &GlobalArgs) -> Result<Loaded, Failure> {
    let path = global
        .config
        .as_deref()
        .ok_or_else(|| Failure::Input("this command needs --config".into()))?;
    config::load(path, global.seed, global.output_dir.as_deref())
}

fn init_threads(threads: usize) {
    if threads > 0 {
        // A second initialization in the same process is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Failure::Input(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct Snapshot<'a> {
    command: &'a str,
    seed: u64,
    overrides: BTreeMap<&'a str, String>,
    config: config::PipelineConfig,
}

/// `resolved_config_<command>.json`. The output directory is recorded as
/// `.` since the snapshot lives inside it.
fn write_snapshot(loaded: &Loaded, command: &str, overrides: BTreeMap<&str, String>) -> Result<(), Failure> {
    let mut config = loaded.config.clone();
    config.output_dir = PathBuf::from(".");
    config.seed = Some(loaded.seed);
    let snapshot = Snapshot {
        command,
        seed: loaded.seed,
        overrides,
        config,
    };
    let name = format!("resolved_config_{}.json", command.replace(' ', "_"));
    write_file(&loaded.output_dir().join(name), &to_json(&snapshot))
}

fn overrides<'a>(pairs: &[(&'a str, Option<String>)]) -> BTreeMap<&'a str, String> {
    pairs.iter().filter_map(|(k, v)| v.clone().map(|v| (*k, v))).collect()
}

fn show(p: Option<&Path>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn catalog_failure(e: CatalogError) -> Failure {
    Failure::Input(e.to_string())
}

fn corpus_failure(e: CorpusError) -> Failure {
    match e {
        CorpusError::Io { .. } | CorpusError::Malformed { .. } => Failure::Input(e.to_string()),
        _ => Failure::Validation(e.to_string()),
    }
}

fn load_catalog(loaded: &Loaded) -> Result<LabelCatalog, Failure> {
    label::load_catalog(loaded.resolve(&loaded.config.catalog)).map_err(catalog_failure)
}

/// Concatenates the record files into one corpus with catalog-checked labels.
fn load_corpus(loaded: &Loaded, input: Option<&Path>, catalog: &LabelCatalog) -> Result<Corpus, Failure> {
    let paths: Vec<PathBuf> = match input {
        Some(p) => vec![p.to_path_buf()],
        None => loaded.config.corpus.iter().map(|p| loaded.resolve(p)).collect(),
    };
    if paths.is_empty() {
        return Err(Failure::Input("no corpus configured".into()));
    }
    let mut records = Vec::new();
    for path in &paths {
        let parsed = corpus::read_records(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        records.extend(parsed.into_iter().map(|(_, r)| r));
    }
    let corpus = Corpus::from_records(records).map_err(corpus_failure)?;
    corpus.check_labels(catalog).map_err(corpus_failure)?;
    Ok(corpus)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Failure::Input(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

// ---------------------------------------------------------------- labels

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelOffender {
    pub file: String,
    pub line: usize,
    pub id: String,
    pub label: LabelKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsReport {
    pub catalog_pairs: usize,
    pub records: usize,
    pub valid: usize,
    pub offenders: Vec<LabelOffender>,
    pub histogram: BTreeMap<LabelKey, usize>,
}

pub fn render_labels(r: &LabelsReport) -> String {
    let mut out = format!(
        "labels: {} records, {} valid, {} offending; catalog has {} pairs\n\n",
        r.records,
        r.valid,
        r.offenders.len(),
        r.catalog_pairs
    );
    let mut hist = Table::new(["label", "records"]);
    for (label, n) in &r.histogram {
        hist.row(vec![label.to_string(), n.to_string()]);
    }
    out.push_str(&hist.render());
    if !r.offenders.is_empty() {
        out.push('\n');
        let mut t = Table::new(["id", "label", "file", "line"]);
        for o in &r.offenders {
            t.row(vec![
                o.id.clone(),
                o.label.to_string(),
                o.file.clone(),
                o.line.to_string(),
            ]);
        }
        out.push_str(&t.render());
    }
    out
}

fn labels_validate(global: &GlobalArgs, catalog: Option<&Path>, corpus_paths: &[PathBuf]) -> Result<(), Failure> {
    let loaded = match &global.config {
        Some(_) => Some(need_config(global)?),
        None => None,
    };
    let catalog_path = match (catalog, &loaded) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(l)) => l.resolve(&l.config.catalog),
        (None, None) => return Err(Failure::Input("no catalog: pass --catalog or --config".into())),
    };
    let cat = label::load_catalog(&catalog_path).map_err(catalog_failure)?;
    let files: Vec<(String, PathBuf)> = if !corpus_paths.is_empty() {
        corpus_paths
            .iter()
            .map(|p| (p.display().to_string(), p.clone()))
            .collect()
    } else if let Some(l) = &loaded {
        l.config
            .corpus
            .iter()
            .map(|p| (p.display().to_string(), l.resolve(p)))
            .collect()
    } else {
        Vec::new()
    };

    let mut report = LabelsReport {
        catalog_pairs: cat.len(),
        records: 0,
        valid: 0,
        offenders: Vec::new(),
        histogram: BTreeMap::new(),
    };
    for (shown, path) in &files {
        let records = corpus::read_records(path).map_err(|e| Failure::Input(format!("{shown}: {e}")))?;
        for (line, record) in records {
            report.records += 1;
            if cat.validate_label(&record.label) {
                report.valid += 1;
                *report.histogram.entry(record.label).or_insert(0) += 1;
            } else {
                report.offenders.push(LabelOffender {
                    file: shown.clone(),
                    line,
                    id: record.id,
                    label: record.label,
                });
            }
        }
    }
    let text = render_labels(&report);
    print!("{text}");
    if let Some(l) = &loaded {
        let out = l.output_dir();
        write_file(&out.join("labels_report.json"), &to_json(&report))?;
        write_file(&out.join("labels_report.txt"), &text)?;
        write_snapshot(l, "labels validate", BTreeMap::new())?;
    }
    if report.offenders.is_empty() {
        Ok(())
    } else {
        let ids: Vec<&str> = report.offenders.iter().map(|o| o.id.as_str()).collect();
        Err(Failure::Validation(format!(
            "records with labels outside the catalog: {}",
            ids.join(", ")
        )))
    }
}

// ------------------------------------------------------------ synthesize

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub task_records: usize,
    pub skipped: Vec<String>,
    pub evolution_steps: Option<usize>,
    pub novelty_trace: Vec<f64>,
    pub converged: Option<bool>,
    pub removed_unanswerable: usize,
    pub evolution_records: usize,
    pub evolution_failures: Vec<String>,
    pub total_records: usize,
}

fn synthesis_failure(e: SynthesisError) -> Failure {
    match e {
        SynthesisError::AllFailed(_) | SynthesisError::AgentFailed { .. } => Failure::Evaluator(e.to_string()),
        SynthesisError::NoKnowledge | SynthesisError::NoSeeds => Failure::Input(e.to_string()),
        SynthesisError::Corpus(c) => corpus_failure(c),
        _ => Failure::Validation(e.to_string()),
    }
}

fn similarity_config(loaded: &Loaded) -> Result<SimilarityConfig, Failure> {
    let v = &loaded.config.verification;
    let embedder: Option<Arc<dyn Embedder>> = match v.embedder {
        EmbedderKind::None => None,
        EmbedderKind::Hashing => Some(Arc::new(HashingEmbedder::default())),
    };
    SimilarityConfig::new(v.lexical_weight, v.ngram_orders.clone(), embedder)
        .map_err(|e| Failure::Validation(e.to_string()))
}

fn synthesize(loaded: &Loaded) -> Result<(), Failure> {
    let section = &loaded.config.synthesis;
    let catalog = load_catalog(loaded)?;
    let knowledge_path = section
        .knowledge
        .as_ref()
        .ok_or_else(|| Failure::Input("synthesis.knowledge is not configured".into()))?;
    let knowledge: Vec<KnowledgeUnit> = read_jsonl(&loaded.resolve(knowledge_path))?;
    let labels: Vec<LabelKey> = if section.labels.is_empty() {
        catalog.labels().cloned().collect()
    } else {
        section.labels.clone()
    };
    let external;
    let agent: &dyn GenerationAgent = match &section.agent {
        Some(spec) => {
            external = SubprocessGenerationAgent(LineProcess::new(spec.clone()));
            &external
        }
        None => &TemplateAgent,
    };
    let track1 = synthesis::run_track1(&knowledge, &labels, &catalog, agent).map_err(synthesis_failure)?;
    let mut report = SynthesisReport {
        task_records: track1.corpus.len(),
        skipped: track1
            .skipped
            .iter()
            .map(|s| format!("{} {}: {}", s.knowledge_id, s.label, s.reason))
            .collect(),
        evolution_steps: None,
        novelty_trace: Vec::new(),
        converged: None,
        removed_unanswerable: 0,
        evolution_records: 0,
        evolution_failures: Vec::new(),
        total_records: 0,
    };
    let mut merged = track1.corpus;
    if let Some(seeds_path) = &section.seeds {
        let seeds: Vec<String> = std::fs::read_to_string(loaded.resolve(seeds_path))
            .map_err(|e| Failure::Input(format!("cannot read {}: {e}", seeds_path.display())))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        let label = section
            .evolution_label
            .clone()
            .ok_or_else(|| Failure::Validation("synthesis.evolution_label is required with seeds".into()))?;
        if !catalog.validate_label(&label) {
            return Err(Failure::Validation(format!(
                "evolution label {label} is not in the catalog"
            )));
        }
        let cfg = similarity_config(loaded)?;
        let feedback = |instructions: &[String]| synthesis::default_feedback(instructions, &cfg);
        let track2 = synthesis::run_track2(
            &seeds,
            &mut TemplateEvolutionAgent::default(),
            &feedback,
            section.k_max,
            section.convergence_eps,
            &cfg,
        )
        .map_err(synthesis_failure)?;
        let (evolved, failures) = synthesis::materialize_evolution(&track2.instructions, &label, &TemplateResponder)
            .map_err(synthesis_failure)?;
        report.evolution_steps = Some(track2.steps);
        report.novelty_trace = track2.novelty_trace;
        report.converged = Some(track2.converged);
        report.removed_unanswerable = track2.removed_unanswerable;
        report.evolution_records = evolved.len();
        report.evolution_failures = failures;
        merged = synthesis::merge_tracks(&merged, &evolved).map_err(synthesis_failure)?;
    }
    report.total_records = merged.len();

    let out = loaded.output_dir();
    write_file(&out.join("synthesized.jsonl"), &merged.to_jsonl())?;
    write_file(&out.join("synthesis_report.json"), &to_json(&report))?;
    let text = render_synthesis(&report);
    write_file(&out.join("synthesis_report.txt"), &text)?;
    write_snapshot(loaded, "synthesize", BTreeMap::new())?;
    print!("{text}");
    Ok(())
}

pub fn render_synthesis(r: &SynthesisReport) -> String {
    let mut t = Table::new(["track", "records", "skipped"]);
    t.row(vec![
        "task".into(),
        r.task_records.to_string(),
        r.skipped.len().to_string(),
    ]);
    if let Some(steps) = r.evolution_steps {
        t.row(vec![
            format!("evolution ({steps} steps)"),
            r.evolution_records.to_string(),
            (r.removed_unanswerable + r.evolution_failures.len()).to_string(),
        ]);
    }
    t.row(vec!["total".into(), r.total_records.to_string(), String::new()]);
    t.render()
}

// ---------------------------------------------------------------- verify

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub id: String,
    pub consistency: f64,
    pub reasoning_valid: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyDoc {
    pub records: Vec<VerifyRow>,
    pub indeterminate: Vec<String>,
}

fn verify(loaded: &Loaded, input: Option<&Path>, responses: Option<&Path>) -> Result<(), Failure> {
    let catalog = load_catalog(loaded)?;
    let corpus = load_corpus(loaded, input, &catalog)?;
    let responses_path = match responses {
        Some(p) => p.to_path_buf(),
        None => loaded.resolve(
            loaded
                .config
                .verification
                .responses
                .as_ref()
                .ok_or_else(|| Failure::Input("verification.responses is not configured".into()))?,
        ),
    };
    let sets: Vec<ResponseSet> = read_jsonl(&responses_path)?;
    let cfg = similarity_config(loaded)?;
    let external;
    let judge: &dyn Judge = match &loaded.config.verification.judge {
        Some(spec) => {
            external = SubprocessJudge(LineProcess::new(spec.clone()));
            &external
        }
        None => &SubstringJudge,
    };
    let (verified, report) =
        verification::verify_corpus(&corpus, &sets, &cfg, judge, &LinearRating).map_err(|e| match e {
            VerifyError::Config(_) => Failure::Validation(e.to_string()),
            _ => Failure::Input(e.to_string()),
        })?;
    let doc = VerifyDoc {
        records: verified
            .records()
            .iter()
            .map(|r| {
                let v = &report.verdicts[&r.id];
                VerifyRow {
                    id: r.id.clone(),
                    consistency: v.consistency,
                    reasoning_valid: v.reasoning_valid,
                    score: v.score,
                }
            })
            .collect(),
        indeterminate: report.indeterminate,
    };
    let mut t = Table::new(["id", "consistency", "valid", "score"]);
    for row in &doc.records {
        t.row(vec![
            row.id.clone(),
            f4(row.consistency),
            row.reasoning_valid.to_string(),
            f4(row.score),
        ]);
    }
    let text = t.render();
    let out = loaded.output_dir();
    write_file(&out.join("verified.jsonl"), &verified.to_jsonl())?;
    write_file(&out.join("verify_report.json"), &to_json(&doc))?;
    write_file(&out.join("verify_report.txt"), &text)?;
    write_snapshot(
        loaded,
        "verify",
        overrides(&[("input", show(input)), ("responses", show(responses))]),
    )?;
    println!(
        "verified {} records ({} indeterminate)",
        doc.records.len(),
        doc.indeterminate.len()
    );
    Ok(())
}

// ---------------------------------------------------------------- govern

fn governance_failure(e: GovernanceError) -> Failure {
    match e {
        GovernanceError::Io { .. } => Failure::Input(e.to_string()),
        GovernanceError::Corpus(c) => corpus_failure(c),
        _ => Failure::Validation(e.to_string()),
    }
}

pub fn render_governance(r: &GovernanceReport) -> String {
    let mut t = Table::new(["stage", "removed", "remaining"]);
    let mut remaining = r.input_count;
    t.row(vec!["input".into(), String::new(), remaining.to_string()]);
    for (stage, removed) in [
        ("dedup", r.dedup_removed),
        ("detox", r.detox_removed),
        ("decontaminate", r.decontam_removed),
        ("final filter", r.below_threshold_removed),
    ] {
        remaining -= removed;
        t.row(vec![stage.into(), removed.to_string(), remaining.to_string()]);
    }
    t.render()
}

fn govern(loaded: &Loaded, input: Option<&Path>, tau: Option<f64>) -> Result<(), Failure> {
    let section = &loaded.config.governance;
    let catalog = load_catalog(loaded)?;
    let corpus = load_corpus(loaded, input, &catalog)?;
    let mut denylist = section.denylist_patterns.clone();
    if let Some(path) = &section.denylist {
        denylist.extend(governance::read_denylist(loaded.resolve(path)).map_err(governance_failure)?);
    }
    let mut index = ContaminationIndex::new(section.ngram_size).map_err(governance_failure)?;
    for path in &section.eval_sets {
        index.add_file(loaded.resolve(path)).map_err(governance_failure)?;
    }
    let mut dedup = section.dedup;
    dedup.seed = seed::derive(loaded.seed, "dedup");
    let params = GovernanceParams {
        dedup,
        denylist,
        threshold: Threshold {
            tau: tau.unwrap_or(section.tau),
            per_label: section.per_label.clone(),
        },
    };
    let (output, report) = governance::govern(&corpus, &params, &index).map_err(governance_failure)?;
    let text = render_governance(&report);
    let out = loaded.output_dir();
    write_file(&out.join("final.jsonl"), &output.to_jsonl())?;
    write_file(&out.join("governance_report.json"), &to_json(&report))?;
    write_file(&out.join("governance_report.txt"), &text)?;
    write_snapshot(
        loaded,
        "govern",
        overrides(&[("input", show(input)), ("tau", tau.map(|t| t.to_string()))]),
    )?;
    print!("{text}");
    Ok(())
}

// --------------------------------------------------------------- weights

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsReport {
    pub epoch: u32,
    pub params_hash: String,
    pub labels: usize,
    pub normalized_sum: f64,
    pub missing_labels: Vec<LabelKey>,
    pub warnings: Vec<String>,
}

fn weight_failure(e: WeightError) -> Failure {
    match e {
        WeightError::EvaluatorFailed { .. } => Failure::Evaluator(e.to_string()),
        WeightError::Io { .. } => Failure::Input(e.to_string()),
        WeightError::Corpus(c) => corpus_failure(c),
        _ => Failure::Validation(e.to_string()),
    }
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::Scenario { .. } => Failure::Input(e.to_string()),
        _ => Failure::Validation(e.to_string()),
    }
}

fn load_scenario(loaded: &Loaded, sim: Option<&Path>, catalog: &LabelCatalog) -> Result<Option<Scenario>, Failure> {
    let path = match (sim, &loaded.config.scenario) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => loaded.resolve(p),
        (None, None) => return Ok(None),
    };
    let scenario = Scenario::load(&path).map_err(sim_failure)?;
    scenario
        .check_catalog(catalog)
        .map_err(|e| Failure::Validation(e.to_string()))?;
    Ok(Some(scenario))
}

pub fn render_weights(table: &WeightTable) -> String {
    let mut t = Table::new([
        "label",
        "pass_cur",
        "pass_ref",
        "raw",
        "smoothed",
        "normalized",
        "n",
        "flags",
    ]);
    for (label, e) in &table.labels {
        let refs = if e.pass_refs.is_empty() {
            None
        } else {
            Some(e.pass_refs.iter().sum::<f64>() / e.pass_refs.len() as f64)
        };
        let mut flags = Vec::new();
        if e.shortfall {
            flags.push("shortfall");
        }
        if e.stale {
            flags.push("stale");
        }
        t.row(vec![
            label.to_string(),
            opt4(e.pass_current),
            opt4(refs),
            f4(e.raw),
            f4(e.smoothed),
            f4(e.normalized),
            e.sampled.to_string(),
            flags.join(","),
        ]);
    }
    format!(
        "epoch {}  params {}  sum {:.9}\n\n{}",
        table.epoch,
        table.params_hash,
        table.normalized_sum(),
        t.render()
    )
}

fn weights_cmd(
    loaded: &Loaded,
    input: Option<&Path>,
    sim: Option<&Path>,
    previous: Option<&Path>,
) -> Result<(), Failure> {
    let section = &loaded.config.weights;
    section.params.validate().map_err(weight_failure)?;
    let catalog = load_catalog(loaded)?;
    let corpus = load_corpus(loaded, input, &catalog)?;
    let (current, references): (Box<dyn ResponseModel>, Vec<Box<dyn ResponseModel>>) =
        if let Some(scenario) = load_scenario(loaded, sim, &catalog)? {
            let current = scenario.current().to_response_model(&corpus).map_err(sim_failure)?;
            let refs = scenario
                .references()
                .map(|m| m.to_response_model(&corpus))
                .collect::<Result<Vec<_>, _>>()
                .map_err(sim_failure)?;
            (current, refs)
        } else if let Some(spec) = &section.current {
            let wrap = |id: String, spec: &finforge_core::protocol::ProcessSpec| -> Box<dyn ResponseModel> {
                Box::new(SubprocessEvaluator {
                    model_id: id,
                    process: LineProcess::new(spec.clone()),
                })
            };
            let refs = section
                .references
                .iter()
                .enumerate()
                .map(|(i, s)| wrap(format!("reference-{i}"), s))
                .collect();
            (wrap("current".into(), spec), refs)
        } else {
            return Err(Failure::Input(
                "no evaluator: configure a scenario, pass --sim, or set weights.current".into(),
            ));
        };
    let previous_path = match previous {
        Some(p) => Some(p.to_path_buf()),
        None => section.previous.as_ref().map(|p| loaded.resolve(p)),
    };
    let prev_table = previous_path
        .map(|p| WeightTable::load(p).map_err(weight_failure))
        .transpose()?;
    let reference_refs: Vec<&dyn ResponseModel> = references.iter().map(|m| m.as_ref()).collect();
    let estimate = weights::estimate_weights(
        &corpus,
        &catalog,
        current.as_ref(),
        &reference_refs,
        &section.params,
        prev_table.as_ref(),
        loaded.seed,
    )
    .map_err(weight_failure)?;
    // Per-label absences are summarized once; the report lists them.
    for w in estimate.warnings.iter().filter(|w| !w.starts_with("catalog label ")) {
        log::warn!("{w}");
    }
    if !estimate.missing_labels.is_empty() {
        log::warn!(
            "{} catalog labels have no records and are not weighted (see weights_report.json)",
            estimate.missing_labels.len()
        );
    }
    let table = &estimate.table;
    let samples = weights::per_sample_weights(&corpus, table).map_err(weight_failure)?;
    let report = WeightsReport {
        epoch: table.epoch,
        params_hash: table.params_hash.clone(),
        labels: table.labels.len(),
        normalized_sum: table.normalized_sum(),
        missing_labels: estimate.missing_labels.clone(),
        warnings: estimate.warnings.clone(),
    };
    let text = render_weights(table);
    let out = loaded.output_dir();
    write_file(&out.join("weights.json"), &table.to_json())?;
    write_file(
        &out.join("sample_weights.jsonl"),
        &weights::sample_weights_jsonl(&samples),
    )?;
    write_file(&out.join("weights_report.json"), &to_json(&report))?;
    write_file(&out.join("weights_report.txt"), &text)?;
    write_snapshot(
        loaded,
        "weights",
        overrides(&[("input", show(input)), ("sim", show(sim)), ("previous", show(previous))]),
    )?;
    print!("{text}");
    println!(
        "normalization checksum: sum {:.12} over {} labels",
        report.normalized_sum, report.labels
    );
    Ok(())
}

// ------------------------------------------------------------------ loop

fn attribution_failure(e: AttributionError) -> Failure {
    match e {
        AttributionError::Evaluator(_)
        | AttributionError::MissingMeasurement(_)
        | AttributionError::BadMeasurement { .. }
        | AttributionError::Synthesizer { .. } => Failure::Evaluator(e.to_string()),
        AttributionError::Checkpoint { .. } => Failure::State(e.to_string()),
        _ => Failure::Validation(e.to_string()),
    }
}

pub fn stop_reason_name(reason: StopReason) -> String {
    serde_json::to_value(reason)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn render_loop(reports: &[IterationReport], stop: Option<StopReason>) -> String {
    let mut t = Table::new([
        "iter", "label", "p_prev", "p_t", "gap", "e_t", "priority", "delta_d", "d_t", "reverted",
    ]);
    for report in reports {
        for row in &report.rows {
            t.row(vec![
                report.iteration.to_string(),
                row.label.to_string(),
                f4(row.p_before),
                f4(row.p_t),
                f4(row.gap),
                format!("{:.3e}", row.efficiency),
                format!("{:.3e}", row.priority),
                f4(row.delta_d),
                f4(row.d_t),
                if row.reverted { "yes".into() } else { "no".into() },
            ]);
        }
    }
    let mut out = t.render();
    if let Some(reason) = stop {
        out.push_str(&format!(
            "\nstop: {} after {} iterations\n",
            stop_reason_name(reason),
            reports.len()
        ));
    }
    out
}

fn loop_run(loaded: &Loaded, args: &LoopRunArgs) -> Result<(), Failure> {
    let catalog = load_catalog(loaded)?;
    let scenario = load_scenario(loaded, args.sim.as_deref(), &catalog)?
        .ok_or_else(|| Failure::Input("loop run needs a simulation scenario (--sim or `scenario`)".into()))?;
    let mut params = loaded.config.attribution.clone();
    if let Some(m) = args.max_iters {
        params.max_iters = m;
    }
    params.validate().map_err(attribution_failure)?;

    let labels = scenario.labels();
    let mut evaluator = SimLoopEvaluator {
        model: scenario.current().to_sim().map_err(sim_failure)?,
        measurement: scenario.measurement,
        instances: scenario.eval_instances,
        seed: seed::derive(loaded.seed, "loop-eval"),
    };
    let mut synthesizer = SimSynthesizer::new(scenario.synth_capacity);
    let out = loaded.output_dir().to_path_buf();
    let checkpoint_path = out.join(CHECKPOINT_FILE);

    let state = if args.resume {
        let checkpoint = Checkpoint::load(&checkpoint_path).map_err(attribution_failure)?;
        if checkpoint.seed != loaded.seed {
            return Err(Failure::State(format!(
                "checkpoint seed {} does not match run seed {}",
                checkpoint.seed, loaded.seed
            )));
        }
        let saved: BTreeSet<&LabelKey> = checkpoint.state.states.iter().map(|s| &s.label).collect();
        if saved != labels.iter().collect() {
            return Err(Failure::State("checkpoint labels do not match the scenario".into()));
        }
        checkpoint.state
    } else {
        let states =
            attribution::initial_states(&labels, scenario.initial_data, &mut evaluator).map_err(attribution_failure)?;
        LoopState::new(states)
    };

    std::fs::create_dir_all(&out).map_err(|e| Failure::Input(format!("cannot create {}: {e}", out.display())))?;
    let mut save_error = None;
    let mut on_iteration = |state: &LoopState| {
        let checkpoint = Checkpoint {
            seed: loaded.seed,
            params: params.clone(),
            state: state.clone(),
        };
        if let Err(e) = checkpoint.save(&checkpoint_path) {
            save_error = Some(e);
            return ControlFlow::Break(());
        }
        match args.halt_after {
            Some(n) if state.iteration >= n => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        }
    };
    let outcome = attribution::run_loop_from(state, &params, &mut evaluator, &mut synthesizer, &mut on_iteration)
        .map_err(attribution_failure)?;
    if let Some(e) = save_error {
        return Err(Failure::State(e.to_string()));
    }
    write_snapshot(
        loaded,
        "loop run",
        overrides(&[
            ("sim", show(args.sim.as_deref())),
            ("max_iters", args.max_iters.map(|m| m.to_string())),
        ]),
    )?;
    let Some(result) = outcome else {
        println!(
            "paused after iteration {}; continue with --resume",
            args.halt_after.unwrap_or(0)
        );
        return Ok(());
    };
    write_loop_outputs(&out, &result)?;
    println!(
        "stop: {} after {} iterations, allocated {:.4}",
        stop_reason_name(result.stop_reason),
        result.iterations_run,
        result.spent
    );
    Ok(())
}

fn write_loop_outputs(out: &Path, result: &LoopResult) -> Result<(), Failure> {
    write_file(&out.join("loop_result.json"), &to_json(result))?;
    write_file(
        &out.join("loop_report.txt"),
        &render_loop(&result.reports, Some(result.stop_reason)),
    )
}

// ---------------------------------------------------------------- report

fn read_typed<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>, Failure> {
    match std::fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Failure::Input(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Failure::Input(format!("cannot read {}: {e}", path.display()))),
    }
}

fn report(loaded: &Loaded) -> Result<(), Failure> {
    let out = loaded.output_dir();
    let mut sections = Vec::new();
    if let Some(r) = read_typed::<LabelsReport>(&out.join("labels_report.json"))? {
        sections.push(("labels", render_labels(&r)));
    }
    if let Some(r) = read_typed::<SynthesisReport>(&out.join("synthesis_report.json"))? {
        sections.push(("synthesis", render_synthesis(&r)));
    }
    if let Some(r) = read_typed::<VerifyDoc>(&out.join("verify_report.json"))? {
        let valid = r.records.iter().filter(|v| v.reasoning_valid).count();
        let mean = r.records.iter().map(|v| v.score).sum::<f64>() / r.records.len().max(1) as f64;
        sections.push((
            "verification",
            format!(
                "{} records, {valid} reasoning-valid, mean score {}\n",
                r.records.len(),
                f4(mean)
            ),
        ));
    }
    if let Some(r) = read_typed::<GovernanceReport>(&out.join("governance_report.json"))? {
        sections.push(("governance", render_governance(&r)));
    }
    if let Some(t) = read_typed::<WeightTable>(&out.join("weights.json"))? {
        sections.push(("weights", render_weights(&t)));
    }
    if let Some(r) = read_typed::<LoopResult>(&out.join("loop_result.json"))? {
        sections.push(("attribution loop", render_loop(&r.reports, Some(r.stop_reason))));
    } else if let Some(c) = read_typed::<Checkpoint>(&out.join(CHECKPOINT_FILE))? {
        sections.push(("attribution loop (paused)", render_loop(&c.state.reports, None)));
    }
    if sections.is_empty() {
        return Err(Failure::Input(format!("no reports found in {}", out.display())));
    }
    let mut text = String::new();
    for (title, body) in sections {
        text.push_str(&format!("== {title} ==\n{body}\n"));
    }
    write_file(&out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Convenience for tests and scripts: loads and returns a corpus the way
/// the commands do.
pub fn read_corpus_file(path: &Path) -> Result<Vec<Record>, Failure> {
    corpus::read_records(path)
        .map(|v| v.into_iter().map(|(_, r)| r).collect())
        .map_err(corpus_failure)
}
