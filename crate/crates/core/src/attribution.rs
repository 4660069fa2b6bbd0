//! Post-training attribution loop: measure per-label pass@1, rank labels by
//! gap × learning efficiency × data decay, split a geometrically decaying
//! budget in proportion to priority, retrain/re-measure, revert regressions.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::ControlFlow;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::label::LabelKey;

#[derive(Debug, thiserror::Error)]
pub enum AttributionError {
    #[error("invalid attribution parameters: {0}")]
    Params(String),
    #[error("negative priority {priority} for label {label}")]
    NegativePriority { label: LabelKey, priority: f64 },
    #[error("negative budget {0}")]
    NegativeBudget(f64),
    #[error("iteration index must be at least 1")]
    ZeroIteration,
    #[error("evaluator failed: {0}")]
    Evaluator(String),
    #[error("evaluator returned no measurement for label {0}")]
    MissingMeasurement(LabelKey),
    #[error("measured pass@1 {value} for label {label} outside [0, 1]")]
    BadMeasurement { label: LabelKey, value: f64 },
    #[error("synthesizer failed for label {label}: {message}")]
    Synthesizer { label: LabelKey, message: String },
    #[error("no tasks to run")]
    NoTasks,
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

/// Target pass@1 as a fraction, global or per label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Global(f64),
    PerLabel(BTreeMap<LabelKey, f64>),
}

impl Target {
    pub fn for_label(&self, label: &LabelKey) -> Option<f64> {
        match self {
            Target::Global(t) => Some(*t),
            Target::PerLabel(m) => m.get(label).copied(),
        }
    }

    /// `min(1, sota + increment)` with the increment given in percentage
    /// points.
    pub fn from_sota(sota: f64, increment_points: f64) -> Self {
        Target::Global((sota + increment_points / 100.0).min(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionParams {
    pub p_target: Target,
    /// Decay of priority in already-allocated data.
    pub lambda: f64,
    /// Budget of the first iteration.
    pub b0: f64,
    /// Per-iteration budget decay factor.
    pub beta_budget: f64,
    /// Stop once total allocation reaches this.
    pub b_max: f64,
    /// Efficiency denominator guard.
    pub eps: f64,
    /// Marginal-improvement floor.
    pub eps_eff: f64,
    pub max_iters: usize,
    pub regression_patience: usize,
    /// Efficiency used before any deltas exist.
    pub e_init: f64,
}

impl Default for AttributionParams {
    fn default() -> Self {
        Self {
            p_target: Target::Global(0.8),
            lambda: 0.0,
            b0: 1000.0,
            beta_budget: 0.9,
            b_max: 20_000.0,
            eps: 1e-8,
            eps_eff: 1e-4,
            max_iters: 20,
            regression_patience: 2,
            e_init: 1.0,
        }
    }
}

impl AttributionParams {
    pub fn validate(&self) -> Result<(), AttributionError> {
        let bad = |m: String| Err(AttributionError::Params(m));
        let targets: Vec<f64> = match &self.p_target {
            Target::Global(t) => vec![*t],
            Target::PerLabel(m) => m.values().copied().collect(),
        };
        if targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("p_target outside [0, 1]".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be nonnegative", self.lambda));
        }
        if !(self.b0 > 0.0) || !(self.b_max > 0.0) {
            return bad("b0 and b_max must be positive".into());
        }
        if !(self.beta_budget > 0.0 && self.beta_budget <= 1.0) {
            return bad(format!("beta_budget {} outside (0, 1]", self.beta_budget));
        }
        if !(self.eps > 0.0) || !(self.eps_eff > 0.0) {
            return bad("eps and eps_eff must be positive".into());
        }
        if !(self.e_init >= 0.0) {
            return bad("e_init must be nonnegative".into());
        }
        Ok(())
    }

    fn target(&self, label: &LabelKey) -> f64 {
        // Labels without a per-label target are treated as already satisfied.
        self.p_target.for_label(label).unwrap_or(0.0)
    }
}

/// Per-label exact-match accuracy over `(label, predicted, gold)` triples.
pub fn pass_at_1(predictions: &[(LabelKey, String, String)]) -> BTreeMap<LabelKey, f64> {
    let mut counts: BTreeMap<LabelKey, (usize, usize)> = BTreeMap::new();
    for (label, predicted, gold) in predictions {
        let entry = counts.entry(label.clone()).or_default();
        entry.1 += 1;
        if predicted == gold {
            entry.0 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(label, (hit, total))| (label, hit as f64 / total as f64))
        .collect()
}

/// [`pass_at_1`] restricted to `labels`; labels with no predictions are
/// returned separately and logged.
pub fn pass_at_1_covering(
    predictions: &[(LabelKey, String, String)],
    labels: &[LabelKey],
) -> (BTreeMap<LabelKey, f64>, Vec<LabelKey>) {
    let mut all = pass_at_1(predictions);
    let mut missing = Vec::new();
    let mut out = BTreeMap::new();
    for label in labels {
        match all.remove(label) {
            Some(v) => {
                out.insert(label.clone(), v);
            }
            None => {
                log::warn!("label {label} has no predictions; excluded from pass@1");
                missing.push(label.clone());
            }
        }
    }
    (out, missing)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorityTerms {
    pub gap: f64,
    pub efficiency: f64,
    pub priority: f64,
}

/// `max(0, Δp) / (Δd + ε)`.
pub fn efficiency(delta_p: f64, delta_d: f64, eps: f64) -> f64 {
    delta_p.max(0.0) / (delta_d + eps)
}

/// `Δ = max(0, target − p)`, `π = Δ · e · exp(−λ·d)`.
pub fn priority_from(p_t: f64, target: f64, d_t: f64, efficiency: f64, lambda: f64) -> PriorityTerms {
    let gap = (target - p_t).max(0.0);
    PriorityTerms {
        gap,
        efficiency,
        priority: gap * efficiency * (-lambda * d_t).exp(),
    }
}

/// Priority of a task from last iteration's improvement and allocation.
pub fn priority(state: &TaskState, params: &AttributionParams, delta_p: f64, delta_d: f64) -> PriorityTerms {
    let e = efficiency(delta_p, delta_d, params.eps);
    priority_from(state.p_t, params.target(&state.label), state.d_t, e, params.lambda)
}

/// `B_k = B_0 · β^{k−1}`.
pub fn iteration_budget(b0: f64, beta_budget: f64, k: usize) -> Result<f64, AttributionError> {
    if k == 0 {
        return Err(AttributionError::ZeroIteration);
    }
    Ok(b0 * beta_budget.powi(k as i32 - 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub amounts: BTreeMap<LabelKey, f64>,
    /// Every priority was zero; nothing was allocated.
    pub stalled: bool,
}

/// Splits `b_k` across labels in proportion to priority.
pub fn allocate(priorities: &BTreeMap<LabelKey, f64>, b_k: f64) -> Result<Allocation, AttributionError> {
    if !(b_k >= 0.0) {
        return Err(AttributionError::NegativeBudget(b_k));
    }
    for (label, &p) in priorities {
        if !(p >= 0.0) {
            return Err(AttributionError::NegativePriority {
                label: label.clone(),
                priority: p,
            });
        }
    }
    let total: f64 = priorities.values().sum();
    if total <= 0.0 {
        return Ok(Allocation {
            amounts: priorities.keys().map(|k| (k.clone(), 0.0)).collect(),
            stalled: true,
        });
    }
    Ok(Allocation {
        amounts: priorities.iter().map(|(k, &p)| (k.clone(), p / total * b_k)).collect(),
        stalled: false,
    })
}

/// Whole-item apportionment: floor every amount, then hand the remaining
/// `floor(Σ) − Σ floor` items to the largest fractional parts (ties by label
/// order).
pub fn apportion(amounts: &BTreeMap<LabelKey, f64>) -> BTreeMap<LabelKey, u64> {
    let total: f64 = amounts.values().sum();
    let target = (total + 1e-9).floor() as u64;
    let mut items: BTreeMap<LabelKey, u64> = amounts.iter().map(|(k, &v)| (k.clone(), v.floor() as u64)).collect();
    let assigned: u64 = items.values().sum();
    let mut fractions: Vec<(&LabelKey, f64)> = amounts.iter().map(|(k, &v)| (k, v - v.floor())).collect();
    fractions.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    for (label, _) in fractions.into_iter().take(target.saturating_sub(assigned) as usize) {
        *items.get_mut(label).expect("same keys") += 1;
    }
    items
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub p_t: f64,
    pub delta_d: f64,
    pub reverted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub label: LabelKey,
    pub p_t: f64,
    /// Cumulative data currently in the task's training mix.
    pub d_t: f64,
    pub history: Vec<HistoryEntry>,
    /// `d_t` after each iteration; index 0 is the starting value.
    pub snapshots: Vec<f64>,
    pub last_delta_p: Option<f64>,
    pub last_delta_d: Option<f64>,
    pub degrade_streak: usize,
}

impl TaskState {
    pub fn new(label: LabelKey, p_t: f64, d_t: f64) -> Self {
        Self {
            label,
            p_t,
            d_t,
            history: Vec::new(),
            snapshots: vec![d_t],
            last_delta_p: None,
            last_delta_d: None,
            degrade_streak: 0,
        }
    }
}

/// "Train on this data and measure": receives the current data amount per
/// label and returns pass@1 per label.
pub trait LoopEvaluator {
    fn evaluate(&mut self, data: &BTreeMap<LabelKey, f64>) -> Result<BTreeMap<LabelKey, f64>, String>;
}

/// Produces new items for a label; returns how many were produced.
/// `regenerate` asks for substantially reworked data after persistent
/// regressions.
pub trait Synthesizer {
    fn synthesize(&mut self, label: &LabelKey, items: u64, regenerate: bool) -> Result<u64, String>;
}

/// Measures initial pass@1 for each label with `d_t = initial_data`.
pub fn initial_states(
    labels: &[LabelKey],
    initial_data: f64,
    evaluator: &mut dyn LoopEvaluator,
) -> Result<Vec<TaskState>, AttributionError> {
    let data: BTreeMap<LabelKey, f64> = labels.iter().map(|l| (l.clone(), initial_data)).collect();
    let measured = evaluator.evaluate(&data).map_err(AttributionError::Evaluator)?;
    labels
        .iter()
        .map(|l| {
            let p = measured
                .get(l)
                .copied()
                .ok_or_else(|| AttributionError::MissingMeasurement(l.clone()))?;
            check_measurement(l, p)?;
            Ok(TaskState::new(l.clone(), p, initial_data))
        })
        .collect()
}

fn check_measurement(label: &LabelKey, value: f64) -> Result<(), AttributionError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(AttributionError::BadMeasurement {
            label: label.clone(),
            value,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub label: LabelKey,
    pub p_before: f64,
    pub p_t: f64,
    pub gap: f64,
    pub efficiency: f64,
    pub priority: f64,
    pub delta_d: f64,
    pub items_requested: u64,
    pub items_produced: u64,
    pub d_t: f64,
    pub reverted: bool,
    pub regenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub budget: f64,
    pub allocated: f64,
    pub stalled: bool,
    pub rows: Vec<IterationRow>,
}

/// One prioritize → allocate → synthesize → train/evaluate pass. Reversion is
/// applied separately by [`maybe_revert`].
pub fn step(
    states: &mut [TaskState],
    params: &AttributionParams,
    evaluator: &mut dyn LoopEvaluator,
    synthesizer: &mut dyn Synthesizer,
    k: usize,
    regenerate: &BTreeSet<LabelKey>,
) -> Result<IterationReport, AttributionError> {
    let budget = iteration_budget(params.b0, params.beta_budget, k)?;
    let terms: Vec<PriorityTerms> = states
        .iter()
        .map(|s| match (s.last_delta_p, s.last_delta_d) {
            (Some(dp), Some(dd)) => priority(s, params, dp, dd),
            _ => priority_from(s.p_t, params.target(&s.label), s.d_t, params.e_init, params.lambda),
        })
        .collect();
    let priorities: BTreeMap<LabelKey, f64> = states
        .iter()
        .zip(&terms)
        .map(|(s, t)| (s.label.clone(), t.priority))
        .collect();
    let allocation = allocate(&priorities, budget)?;
    if allocation.stalled {
        log::warn!("iteration {k}: every priority is zero; allocation stalled");
    }
    let items = apportion(&allocation.amounts);

    let mut rows = Vec::with_capacity(states.len());
    let mut added = Vec::with_capacity(states.len());
    for state in states.iter() {
        let requested = items[&state.label];
        let regen = regenerate.contains(&state.label);
        let produced = if requested > 0 || regen {
            synthesizer
                .synthesize(&state.label, requested, regen)
                .map_err(|message| AttributionError::Synthesizer {
                    label: state.label.clone(),
                    message,
                })?
                .min(requested)
        } else {
            0
        };
        let amount = allocation.amounts[&state.label];
        let deficit = (requested - produced) as f64;
        if deficit > 0.0 {
            log::warn!(
                "iteration {k}: synthesizer produced {produced} of {requested} items for {}",
                state.label
            );
        }
        added.push((amount - deficit).max(0.0));
        rows.push((requested, produced, regen));
    }
    for (state, &delta) in states.iter_mut().zip(&added) {
        state.d_t += delta;
    }
    let data: BTreeMap<LabelKey, f64> = states.iter().map(|s| (s.label.clone(), s.d_t)).collect();
    let measured = evaluator.evaluate(&data).map_err(AttributionError::Evaluator)?;

    let mut report_rows = Vec::with_capacity(states.len());
    for ((state, term), ((requested, produced, regen), &delta)) in
        states.iter_mut().zip(&terms).zip(rows.into_iter().zip(&added))
    {
        let p_new = measured
            .get(&state.label)
            .copied()
            .ok_or_else(|| AttributionError::MissingMeasurement(state.label.clone()))?;
        check_measurement(&state.label, p_new)?;
        let p_before = state.p_t;
        state.last_delta_p = Some(p_new - p_before);
        state.last_delta_d = Some(delta);
        state.p_t = p_new;
        state.history.push(HistoryEntry {
            iteration: k,
            p_t: p_new,
            delta_d: delta,
            reverted: false,
        });
        state.snapshots.push(state.d_t);
        report_rows.push(IterationRow {
            label: state.label.clone(),
            p_before,
            p_t: p_new,
            gap: term.gap,
            efficiency: term.efficiency,
            priority: term.priority,
            delta_d: delta,
            items_requested: requested,
            items_produced: produced,
            d_t: state.d_t,
            reverted: false,
            regenerate: regen,
        });
    }
    Ok(IterationReport {
        iteration: k,
        budget,
        allocated: allocation.amounts.values().sum(),
        stalled: allocation.stalled,
        rows: report_rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RevertOutcome {
    pub reverted: bool,
    pub regenerate: bool,
}

/// Restores the previous data snapshot when the latest measurement dropped,
/// and asks for regeneration after `regression_patience` consecutive drops.
pub fn maybe_revert(state: &mut TaskState, params: &AttributionParams) -> RevertOutcome {
    let n = state.snapshots.len();
    let Some(last) = state.history.last() else {
        log::warn!("label {}: no iteration recorded; nothing to revert", state.label);
        return RevertOutcome::default();
    };
    if n < 2 {
        log::warn!("label {}: no snapshot to revert to", state.label);
        return RevertOutcome::default();
    }
    let dropped = state.last_delta_p.is_some_and(|dp| dp < 0.0);
    if !dropped {
        state.degrade_streak = 0;
        return RevertOutcome::default();
    }
    debug_assert_eq!(last.iteration, state.history.len());
    let restored = state.snapshots[n - 2];
    state.d_t = restored;
    state.snapshots[n - 1] = restored;
    if let Some(entry) = state.history.last_mut() {
        entry.reverted = true;
    }
    state.degrade_streak += 1;
    let regenerate = params.regression_patience > 0 && state.degrade_streak >= params.regression_patience;
    if regenerate {
        state.degrade_streak = 0;
    }
    RevertOutcome {
        reverted: true,
        regenerate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    AllTargetsMet,
    BudgetExhausted,
    EfficiencyFloor,
    MaxIters,
}

/// Resumable loop state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    /// Completed iterations.
    pub iteration: usize,
    pub states: Vec<TaskState>,
    /// Total data allocated so far (not reduced by reversion).
    pub spent: f64,
    /// Consecutive iterations whose best improvement was below `eps_eff`.
    pub flat_streak: usize,
    pub pending_regenerate: BTreeSet<LabelKey>,
    pub reports: Vec<IterationReport>,
}

impl LoopState {
    pub fn new(states: Vec<TaskState>) -> Self {
        Self {
            iteration: 0,
            states,
            spent: 0.0,
            flat_streak: 0,
            pending_regenerate: BTreeSet::new(),
            reports: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopResult {
    pub iterations_run: usize,
    pub states: Vec<TaskState>,
    pub stop_reason: StopReason,
    pub spent: f64,
    pub reports: Vec<IterationReport>,
}

/// Checks the stop conditions in priority order.
pub fn stop_condition(state: &LoopState, params: &AttributionParams) -> Option<StopReason> {
    if state.states.iter().all(|s| s.p_t >= params.target(&s.label)) {
        return Some(StopReason::AllTargetsMet);
    }
    if state.spent >= params.b_max {
        return Some(StopReason::BudgetExhausted);
    }
    if state.flat_streak >= 2 {
        return Some(StopReason::EfficiencyFloor);
    }
    if state.iteration >= params.max_iters {
        return Some(StopReason::MaxIters);
    }
    None
}

/// Runs iterations until a stop condition fires. `on_iteration` sees the
/// state after every completed iteration (for checkpointing) and may break
/// to pause the loop, in which case `Ok(None)` is returned.
pub fn run_loop_from(
    mut state: LoopState,
    params: &AttributionParams,
    evaluator: &mut dyn LoopEvaluator,
    synthesizer: &mut dyn Synthesizer,
    on_iteration: &mut dyn FnMut(&LoopState) -> ControlFlow<()>,
) -> Result<Option<LoopResult>, AttributionError> {
    params.validate()?;
    if state.states.is_empty() {
        return Err(AttributionError::NoTasks);
    }
    loop {
        if let Some(stop_reason) = stop_condition(&state, params) {
            return Ok(Some(LoopResult {
                iterations_run: state.iteration,
                states: state.states,
                stop_reason,
                spent: state.spent,
                reports: state.reports,
            }));
        }
        let k = state.iteration + 1;
        let regenerate = std::mem::take(&mut state.pending_regenerate);
        let mut report = step(&mut state.states, params, evaluator, synthesizer, k, &regenerate)?;
        state.spent += report.allocated;
        let best_gain = state
            .states
            .iter()
            .filter_map(|s| s.last_delta_p)
            .fold(f64::NEG_INFINITY, f64::max);
        if best_gain < params.eps_eff {
            state.flat_streak += 1;
        } else {
            state.flat_streak = 0;
        }
        for (task, row) in state.states.iter_mut().zip(report.rows.iter_mut()) {
            let outcome = maybe_revert(task, params);
            if outcome.reverted {
                row.reverted = true;
                row.d_t = task.d_t;
            }
            if outcome.regenerate {
                log::info!("label {}: persistent regression, requesting regeneration", task.label);
                state.pending_regenerate.insert(task.label.clone());
            }
        }
        state.reports.push(report);
        state.iteration = k;
        if on_iteration(&state).is_break() {
            return Ok(None);
        }
    }
}

pub fn run_loop(
    initial: Vec<TaskState>,
    params: &AttributionParams,
    evaluator: &mut dyn LoopEvaluator,
    synthesizer: &mut dyn Synthesizer,
) -> Result<LoopResult, AttributionError> {
    let result = run_loop_from(LoopState::new(initial), params, evaluator, synthesizer, &mut |_| {
        ControlFlow::Continue(())
    })?;
    Ok(result.expect("loop without a pause hook always finishes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub params: AttributionParams,
    pub state: LoopState,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AttributionError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        text.push('\n');
        // Write-then-rename so an interrupted write never leaves a torn file.
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text)
            .and_then(|_| std::fs::rename(&tmp, path))
            .map_err(|e| AttributionError::Checkpoint {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AttributionError> {
        let path = path.as_ref();
        let err = |message: String| AttributionError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let checkpoint: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        for task in &checkpoint.state.states {
            if task.snapshots.is_empty() || !(0.0..=1.0).contains(&task.p_t) {
                return Err(err(format!("inconsistent state for label {}", task.label)));
            }
        }
        Ok(checkpoint)
    }
}
