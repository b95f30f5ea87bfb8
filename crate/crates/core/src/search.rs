//! Schedule-driven local search over pruned sets, and magnitude baselines.
//!
//! Step `i` of a schedule is a pair `(t̂, p̂)`: change about `t̂` groups, of
//! which the net effect is `p̂` more pruned groups. It evicts `s₁ = ⌊(t̂−p̂)/2⌋`
//! groups from `S` and adds `s₂ = ⌊(t̂+p̂)/2⌋` groups to it, both picked from
//! single-group impact scores at the current `S`.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::problem::{group_norms, scatter_rows, solve_direct, PartitionKind, PruneSelection, QuadraticProblem};
use crate::update::{relative_error, EngineOptions, PruneState};

/// Extra `(t̂, 0)` swap steps appended by the non-nested preset.
pub const DEFAULT_EXTRA_SWAPS: usize = 30;

/// Minimum decrease for a pure swap step to be kept.
pub const SWAP_ACCEPT_MARGIN: f64 = 1e-12;

/// Group-count `t̂` used when a preset does not give one.
pub fn default_t_hat(kind: PartitionKind) -> usize {
    match kind {
        PartitionKind::Dense => 10,
        _ => 2,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSchedule {
    steps: Vec<(usize, usize)>,
}

impl SearchSchedule {
    pub fn new(steps: Vec<(usize, usize)>) -> Result<Self> {
        for (i, &(t, p)) in steps.iter().enumerate() {
            if t == 0 || p > t {
                return Err(Error::InvalidSchedule(format!("step {i} is ({t}, {p}); need 1 ≤ t and p ≤ t")));
            }
        }
        Ok(SearchSchedule { steps })
    }

    pub fn steps(&self) -> &[(usize, usize)] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Total groups pruned, `Σ p_i`.
    pub fn prune_count(&self) -> usize {
        self.steps.iter().map(|&(_, p)| p).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetKind {
    Nested,
    NonNested,
    Greedy,
}

impl PresetKind {
    pub fn name(self) -> &'static str {
        match self {
            PresetKind::Nested => "nested",
            PresetKind::NonNested => "non_nested",
            PresetKind::Greedy => "greedy",
        }
    }
}

/// A schedule description, either a preset or explicit steps.
///
/// JSON forms: `{"preset":"nested","t_hat":2,"extra_swaps":0}` and
/// `{"steps":[[2,2],[2,0]]}`. String form: `nested:t=2`,
/// `non_nested:t=2,extra=30`, `greedy`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum SchedulePreset {
    Preset {
        preset: PresetKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t_hat: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        extra_swaps: Option<usize>,
    },
    Custom {
        steps: Vec<(usize, usize)>,
    },
}

impl SchedulePreset {
    pub fn nested(t_hat: usize) -> Self {
        SchedulePreset::Preset { preset: PresetKind::Nested, t_hat: Some(t_hat), extra_swaps: None }
    }

    pub fn non_nested(t_hat: usize, extra_swaps: usize) -> Self {
        SchedulePreset::Preset { preset: PresetKind::NonNested, t_hat: Some(t_hat), extra_swaps: Some(extra_swaps) }
    }

    pub fn greedy() -> Self {
        SchedulePreset::Preset { preset: PresetKind::Greedy, t_hat: None, extra_swaps: None }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidSchedule(e.to_string()))
    }

    /// Tag used as the report's method name.
    pub fn method(&self) -> &'static str {
        match self {
            SchedulePreset::Preset { preset, .. } => preset.name(),
            SchedulePreset::Custom { .. } => "custom",
        }
    }

    /// Expands to concrete steps, filling a missing `t̂` from the partition
    /// kind.
    pub fn resolve(&self, p_prime: usize, kind: PartitionKind) -> Result<SearchSchedule> {
        match *self {
            SchedulePreset::Preset { preset, t_hat, extra_swaps } => make_schedule(
                preset,
                p_prime,
                t_hat.unwrap_or_else(|| default_t_hat(kind)),
                extra_swaps.unwrap_or(DEFAULT_EXTRA_SWAPS),
            ),
            SchedulePreset::Custom { ref steps } => {
                let schedule = SearchSchedule::new(steps.clone())?;
                if schedule.prune_count() != p_prime {
                    return Err(Error::InvalidSchedule(format!(
                        "steps prune {} groups but {p_prime} were requested",
                        schedule.prune_count()
                    )));
                }
                Ok(schedule)
            }
        }
    }
}

impl FromStr for SchedulePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with('{') {
            return Self::from_json(s);
        }
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let preset = match name {
            "nested" => PresetKind::Nested,
            "non_nested" | "non-nested" => PresetKind::NonNested,
            "greedy" => PresetKind::Greedy,
            other => return Err(Error::InvalidSchedule(format!("unknown preset {other:?}"))),
        };
        let (mut t_hat, mut extra_swaps) = (None, None);
        for arg in args.split(',').map(str::trim).filter(|a| !a.is_empty()) {
            let (key, value) = arg
                .split_once('=')
                .ok_or_else(|| Error::InvalidSchedule(format!("expected key=value, got {arg:?}")))?;
            let value: usize =
                value.trim().parse().map_err(|_| Error::InvalidSchedule(format!("bad number in {arg:?}")))?;
            match key.trim() {
                "t" | "t_hat" => t_hat = Some(value),
                "extra" | "extra_swaps" => extra_swaps = Some(value),
                other => return Err(Error::InvalidSchedule(format!("unknown schedule key {other:?}"))),
            }
        }
        Ok(SchedulePreset::Preset { preset, t_hat, extra_swaps })
    }
}

/// Expands a preset. `p_prime = 0` gives an empty schedule.
pub fn make_schedule(preset: PresetKind, p_prime: usize, t_hat: usize, extra_swaps: usize) -> Result<SearchSchedule> {
    if t_hat == 0 && preset != PresetKind::Greedy {
        return Err(Error::InvalidSchedule("t_hat must be at least 1".into()));
    }
    let nested = |t: usize| -> Vec<(usize, usize)> {
        (0..p_prime.div_ceil(t)).map(|i| (t, t.min(p_prime - i * t))).collect()
    };
    let steps = match preset {
        PresetKind::Nested => nested(t_hat),
        PresetKind::NonNested => {
            let mut steps = nested(t_hat);
            if p_prime > 0 {
                steps.extend(std::iter::repeat_n((t_hat, 0), extra_swaps));
            }
            steps
        }
        PresetKind::Greedy => vec![(1, 1); p_prime],
    };
    SearchSchedule::new(steps)
}

/// How impact scores pick the groups that enter and leave `S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionDirection {
    /// Prune the cheapest groups (lowest `B_j` outside `S`) and restore the
    /// members whose return lowers `f` most (highest `B_j` inside `S`).
    Minimizing,
    /// The opposite ranking: prune the highest-`B_j` groups, restore the
    /// lowest-`B_j` members.
    Literal,
}

impl SelectionDirection {
    /// The reading confirmed by `oracle::direction_test`.
    pub const RESOLVED: SelectionDirection = SelectionDirection::Minimizing;

    pub fn other(self) -> SelectionDirection {
        match self {
            SelectionDirection::Minimizing => SelectionDirection::Literal,
            SelectionDirection::Literal => SelectionDirection::Minimizing,
        }
    }
}

/// `B_j` per group: for `j ∈ S` the decrease from restoring `j`, for `j ∉ S`
/// the increase from pruning it. `None` where not requested.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpactScores {
    scores: Vec<Option<f64>>,
}

impl ImpactScores {
    pub fn get(&self, j: usize) -> Option<f64> {
        self.scores.get(j).copied().flatten()
    }

    pub fn as_slice(&self) -> &[Option<f64>] {
        &self.scores
    }

    /// `k` of the `(group, score)` pairs, ranked ascending or descending,
    /// ties to the lower group index.
    fn pick(&self, members: impl Iterator<Item = usize>, k: usize, highest: bool) -> Vec<usize> {
        if k == 0 {
            return Vec::new();
        }
        let mut ranked: Vec<(usize, f64)> = members.map(|j| (j, self.get(j).expect("score computed"))).collect();
        ranked.sort_by(|a, b| {
            let ord = a.1.total_cmp(&b.1);
            (if highest { ord.reverse() } else { ord }).then(a.0.cmp(&b.0))
        });
        let mut picked: Vec<usize> = ranked.into_iter().take(k).map(|(j, _)| j).collect();
        picked.sort_unstable();
        picked
    }
}

/// Scores every requested group against the frozen state; runs in parallel
/// with results kept in group order.
pub fn compute_impacts(state: &PruneState, in_s: bool, out_s: bool) -> Result<ImpactScores> {
    let p = state.problem().group_count();
    let scores = (0..p)
        .into_par_iter()
        .map(|j| {
            let pruned = state.selection().contains(j);
            let score = match (pruned, in_s, out_s) {
                (true, true, _) => Some(state.score_restoration(j)?),
                (false, _, true) => Some(state.score_removal(j)?),
                _ => None,
            };
            match score {
                Some(s) if !s.is_finite() => Err(Error::SingularBlock { groups: vec![j] }),
                other => Ok(other),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImpactScores { scores })
}

/// Evicted and added counts for one step after clamping to what `S` allows.
pub fn step_sizes(t_hat: usize, p_hat: usize, pruned: usize, groups: usize) -> Result<(usize, usize)> {
    if p_hat > t_hat {
        return Err(Error::InvalidSchedule(format!("p̂ = {p_hat} exceeds t̂ = {t_hat}")));
    }
    let mut s1 = (t_hat - p_hat) / 2;
    let mut s2 = (t_hat + p_hat) / 2;
    if s1 > pruned {
        s1 = pruned;
        s2 = s1 + p_hat;
    }
    let free = groups.saturating_sub(pruned);
    if s2 > free {
        s2 = free;
        s1 = s2.checked_sub(p_hat).ok_or_else(|| {
            Error::ScheduleInfeasible(format!("cannot prune {p_hat} more groups with only {free} unpruned"))
        })?;
    }
    Ok((s1, s2))
}

/// What a single `local_step` did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub restored: Vec<usize>,
    pub pruned: Vec<usize>,
    pub accepted: bool,
}

/// One schedule step. With `p̂ = 0` the candidate is kept only if it lowers
/// `f` by more than `SWAP_ACCEPT_MARGIN`.
pub fn local_step(
    state: &mut PruneState,
    t_hat: usize,
    p_hat: usize,
    direction: SelectionDirection,
) -> Result<StepOutcome> {
    let p = state.problem().group_count();
    let (s1, s2) = step_sizes(t_hat, p_hat, state.selection().len(), p)?;
    if s1 == 0 && s2 == 0 {
        return Ok(StepOutcome { restored: vec![], pruned: vec![], accepted: true });
    }
    let scores = compute_impacts(state, s1 > 0, s2 > 0)?;
    let inside = state.selection().clone();
    let outside = (0..p).filter(|j| !inside.contains(*j));
    let minimizing = direction == SelectionDirection::Minimizing;
    let restored = scores.pick(inside.iter(), s1, minimizing);
    let pruned = scores.pick(outside, s2, !minimizing);

    if p_hat == 0 {
        let mut candidate = state.clone();
        candidate.swap(&restored, &pruned)?;
        let accepted = candidate.objective() < state.objective() - SWAP_ACCEPT_MARGIN;
        if accepted {
            *state = candidate;
        }
        return Ok(StepOutcome { restored, pruned, accepted });
    }
    state.swap(&restored, &pruned)?;
    Ok(StepOutcome { restored, pruned, accepted: true })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchOptions {
    pub direction: SelectionDirection,
    pub engine: EngineOptions,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { direction: SelectionDirection::RESOLVED, engine: EngineOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub t: usize,
    pub p: usize,
    pub pruned: usize,
    pub objective: f64,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub init_ms: f64,
    pub search_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<SelectionDirection>,
    pub schedule: Vec<(usize, usize)>,
    pub groups: usize,
    pub prune_count: usize,
    pub selection: Vec<usize>,
    pub objective: f64,
    pub reconstruction_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized_loss: Option<f64>,
    /// `p / (p − p′)`; absent when every group is pruned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup_ratio: Option<f64>,
    pub trace: Vec<TraceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
    pub version: String,
    /// Full `d₁×d₂` weights with pruned rows zeroed.
    #[serde(skip)]
    pub weights: Option<Matrix>,
}

impl PruneReport {
    fn assemble(
        problem: &QuadraticProblem,
        method: &str,
        direction: Option<SelectionDirection>,
        schedule: Vec<(usize, usize)>,
        selection: &PruneSelection,
        objective: f64,
        weights: Matrix,
    ) -> PruneReport {
        let p = problem.group_count();
        let loss = objective + problem.const_term();
        PruneReport {
            method: method.to_string(),
            direction,
            schedule,
            groups: p,
            prune_count: selection.len(),
            selection: selection.as_slice().to_vec(),
            objective,
            reconstruction_loss: loss,
            normalized_loss: problem.samples().filter(|&n| n > 0).map(|n| loss / n as f64),
            speedup_ratio: (selection.len() < p).then(|| p as f64 / (p - selection.len()) as f64),
            trace: Vec::new(),
            timings: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            weights: Some(weights),
        }
    }

    /// Drops wall-clock fields so reports are reproducible byte for byte.
    pub fn strip_timing(&mut self) {
        self.timings = None;
        for entry in &mut self.trace {
            entry.elapsed_ms = None;
        }
    }

    pub fn pruned_selection(&self) -> Result<PruneSelection> {
        PruneSelection::new(self.selection.clone(), self.groups)
    }

    /// Relative difference between the reported objective and a direct solve
    /// of the reported selection.
    pub fn check_against(&self, problem: &QuadraticProblem) -> Result<f64> {
        let sol = solve_direct(problem, &problem.selection(self.selection.clone())?)?;
        Ok(relative_error(self.objective, sol.objective))
    }
}

/// Tolerance for the final objective against a direct solve.
pub const REPORT_TOLERANCE: f64 = 1e-6;

/// Runs every step of `schedule` from an empty pruned set.
pub fn run_local_search(
    problem: &QuadraticProblem,
    schedule: &SearchSchedule,
    method: &str,
    options: &SearchOptions,
) -> Result<PruneReport> {
    let p = problem.group_count();
    if schedule.prune_count() > p {
        return Err(Error::ScheduleInfeasible(format!(
            "schedule prunes {} groups but the problem has {p}",
            schedule.prune_count()
        )));
    }
    let start = Instant::now();
    let mut state = PruneState::new(problem, options.engine)?;
    let init_ms = ms(start);
    let mut trace = Vec::with_capacity(schedule.len());
    for (i, &(t, p_hat)) in schedule.steps().iter().enumerate() {
        let outcome = local_step(&mut state, t, p_hat, options.direction)?;
        trace.push(TraceEntry {
            step: i,
            t,
            p: p_hat,
            pruned: state.selection().len(),
            objective: state.objective(),
            accepted: outcome.accepted,
            elapsed_ms: Some(ms(start)),
        });
    }
    let search_ms = ms(start) - init_ms;
    let deviation = state.deviation_from_direct()?;
    if !(deviation.objective <= REPORT_TOLERANCE) {
        return Err(Error::Drift { what: "objective", deviation: deviation.objective });
    }
    let mut report = PruneReport::assemble(
        problem,
        method,
        Some(options.direction),
        schedule.steps().to_vec(),
        state.selection(),
        state.objective(),
        state.full_weights(),
    );
    report.trace = trace;
    report.timings = Some(Timings { init_ms, search_ms, total_ms: ms(start) });
    Ok(report)
}

/// Prunes the `p_prime` groups of `H⁻¹G` with the smallest Frobenius norm
/// (ties to the lower index). Without `refit` the surviving rows keep their
/// dense values; with it they are re-solved on the kept rows.
pub fn magnitude_prune(problem: &QuadraticProblem, p_prime: usize, refit: bool) -> Result<PruneReport> {
    let p = problem.group_count();
    if p_prime > p {
        return Err(Error::ScheduleInfeasible(format!("cannot prune {p_prime} of {p} groups")));
    }
    let start = Instant::now();
    let dense = solve_direct(problem, &PruneSelection::empty())?;
    let w_hat = dense.weights;
    let norms = group_norms(problem.partition(), &w_hat);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let selection = problem.selection(order[..p_prime].to_vec())?;
    let (objective, weights) = if refit {
        let sol = solve_direct(problem, &selection)?;
        let full = sol.full_weights(problem.d1());
        (sol.objective, full)
    } else {
        let mut truncated = w_hat.clone();
        for j in selection.iter() {
            for row in problem.partition().group(j).iter() {
                truncated.inner_mut().row_mut(row).fill(0.0);
            }
        }
        (problem.objective_at(&truncated)?, truncated)
    };
    let method = if refit { "mp_plus" } else { "mp" };
    let mut report = PruneReport::assemble(problem, method, None, Vec::new(), &selection, objective, weights);
    let total_ms = ms(start);
    report.timings = Some(Timings { init_ms: 0.0, search_ms: total_ms, total_ms });
    Ok(report)
}

/// Resolves `preset` against the problem and runs it.
pub fn prune_problem(
    problem: &QuadraticProblem,
    preset: &SchedulePreset,
    p_prime: usize,
    options: &SearchOptions,
) -> Result<PruneReport> {
    let schedule = preset.resolve(p_prime, problem.partition().kind())?;
    run_local_search(problem, &schedule, preset.method(), options)
}

/// Reported weights, or a direct solve of the reported selection when the
/// report carries none (e.g. after deserializing).
pub fn report_weights(report: &PruneReport, problem: &QuadraticProblem) -> Result<Matrix> {
    match &report.weights {
        Some(w) => Ok(w.clone()),
        None => {
            let sol = solve_direct(problem, &report.pruned_selection()?)?;
            Ok(scatter_rows(&sol.weights, &sol.retained, problem.d1()))
        }
    }
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}
