//! Ground truth for small instances and the verification suites built on it.
//!
//! `brute_force` enumerates every pruned set of a given size and solves each
//! directly. The remaining functions use it, or `solve_direct`, to settle
//! which update signs and which selection ranking are correct, to measure
//! optimality gaps, and to check that incremental updates never drift.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Matrix, SymMatrix};
use crate::problem::{solve_direct, GroupPartition, PruneSelection, QuadraticProblem};
use crate::rng::SeedSplitter;
use crate::search::{
    magnitude_prune, make_schedule, run_local_search, PresetKind, SearchOptions, SelectionDirection,
    DEFAULT_EXTRA_SWAPS,
};
use crate::update::{relative_error, DeltaSigns, EngineOptions, PruneState};

pub const DEFAULT_CAP: u128 = 2_000_000;

/// Tolerance for matching an engine delta against a direct difference.
pub const SIGN_TOLERANCE: f64 = 1e-9;

/// Tolerance for incremental state against a direct solve.
pub const PATH_TOLERANCE: f64 = 1e-7;

/// Group sizes and output width of a random instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceShape {
    pub group_sizes: Vec<usize>,
    pub d2: usize,
}

impl InstanceShape {
    pub fn uniform(groups: usize, group_size: usize, d2: usize) -> Self {
        InstanceShape { group_sizes: vec![group_size; groups], d2 }
    }

    /// Group sizes drawn uniformly from 1 to 4.
    pub fn random_sizes(groups: usize, d2: usize, rng: &mut impl Rng) -> Self {
        InstanceShape { group_sizes: (0..groups).map(|_| rng.random_range(1..=4)).collect(), d2 }
    }

    pub fn d1(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    pub fn partition(&self) -> GroupPartition {
        let mut next = 0;
        let groups = self
            .group_sizes
            .iter()
            .map(|&size| {
                let g: Vec<usize> = (next..next + size).collect();
                next += size;
                g
            })
            .collect();
        GroupPartition::custom(self.d1(), groups).expect("contiguous groups tile the rows")
    }
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `H = BᵀB + 0.1·I` with `B` a `d₁×d₁` standard normal matrix, `G`
/// standard normal, groups contiguous in the order of `shape.group_sizes`.
pub fn random_instance(rng: &mut impl Rng, shape: &InstanceShape) -> QuadraticProblem {
    let d1 = shape.d1();
    let b = normal_matrix(rng, d1, d1);
    let mut h = b.tr_mul(&b);
    for i in 0..d1 {
        h[(i, i)] += 0.1;
    }
    let g = normal_matrix(rng, d1, shape.d2);
    QuadraticProblem::new(SymMatrix::symmetrized(h), Matrix::from_inner(g), shape.partition(), 0.0)
        .expect("shifted Gram matrix is positive definite")
}

/// Singleton groups, `H = I`, so `f` separates over rows.
pub fn identity_instance(g: &Matrix) -> QuadraticProblem {
    QuadraticProblem::new(SymMatrix::identity(g.rows()), g.clone(), GroupPartition::dense(g.rows()), 0.0)
        .expect("identity is positive definite")
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Advances `c` to the next `k`-subset of `0..n` in lexicographic order.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    for i in (0..k).rev() {
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub best: PruneSelection,
    pub best_objective: f64,
    pub evaluated: usize,
    /// Every subset with its objective, in lexicographic order.
    pub table: Option<Vec<(Vec<usize>, f64)>>,
}

/// Exhaustive minimum of `f` over pruned sets of size `p_prime`. Ties keep the
/// lexicographically first set.
pub fn brute_force(problem: &QuadraticProblem, p_prime: usize, cap: u128, keep_table: bool) -> Result<OracleResult> {
    let p = problem.group_count();
    let count = binomial(p, p_prime);
    if count > cap {
        return Err(Error::TooManySubsets { count, cap });
    }
    if count == 0 {
        return Err(Error::ScheduleInfeasible(format!("cannot prune {p_prime} of {p} groups")));
    }
    const CHUNK: usize = 4096;
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut table = keep_table.then(Vec::new);
    let mut current: Vec<usize> = (0..p_prime).collect();
    let mut more = true;
    let mut evaluated = 0;
    while more {
        let mut chunk = Vec::with_capacity(CHUNK);
        while more && chunk.len() < CHUNK {
            chunk.push(current.clone());
            more = next_combination(&mut current, p);
        }
        let values = chunk
            .par_iter()
            .map(|s| Ok(solve_direct(problem, &PruneSelection::new(s.clone(), p)?)?.objective))
            .collect::<Result<Vec<f64>>>()?;
        evaluated += chunk.len();
        for (s, f) in chunk.into_iter().zip(values) {
            if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
                best = Some((s.clone(), f));
            }
            if let Some(t) = table.as_mut() {
                t.push((s, f));
            }
        }
    }
    let (best, best_objective) = best.expect("at least one subset");
    Ok(OracleResult { best: PruneSelection::new(best, p)?, best_objective, evaluated, table })
}

/// Whether `f(S) ≤ f(S ∪ {j})` holds for every `S` and `j ∉ S`; returns the
/// largest violation (0 when none). Exponential in `p`.
pub fn monotonicity_violation(problem: &QuadraticProblem) -> Result<f64> {
    let p = problem.group_count();
    assert!(p <= 16, "exhaustive check limited to small p");
    let f: Vec<f64> = (0u32..1 << p)
        .into_par_iter()
        .map(|mask| {
            let groups = (0..p).filter(|j| mask & (1 << j) != 0).collect();
            Ok(solve_direct(problem, &PruneSelection::new(groups, p)?)?.objective)
        })
        .collect::<Result<_>>()?;
    let mut worst: f64 = 0.0;
    for mask in 0..1usize << p {
        for j in 0..p {
            if mask & (1 << j) == 0 {
                worst = worst.max(f[mask] - f[mask | (1 << j)]);
            }
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignReport {
    pub case1_sign: f64,
    pub case2_sign: f64,
    pub instances: usize,
    /// Worst mismatch of the chosen signs over all instances.
    pub max_mismatch: f64,
    /// Whether the engine under test, with its configured signs, reproduced
    /// every direct difference.
    pub engine_consistent: bool,
}

fn random_selection(rng: &mut impl Rng, p: usize, size: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..p).collect();
    for i in 0..size {
        let k = rng.random_range(i..p);
        all.swap(i, k);
    }
    all.truncate(size);
    all.sort_unstable();
    all
}

/// Settles the sign of the objective change for pruning (case 1) and
/// restoring (case 2) one group by comparing the engine's raw half-trace
/// against direct differences under both candidate signs.
pub fn sign_test(instances: usize, splitter: &SeedSplitter, engine: EngineOptions) -> Result<SignReport> {
    let mut worst = [[0.0f64; 2]; 2];
    let mut engine_worst: f64 = 0.0;
    let candidates = [1.0, -1.0];
    for i in 0..instances {
        let mut rng = splitter.child("sign").stream(&i.to_string());
        let p = rng.random_range(3..=8);
        let d2 = rng.random_range(1..=4);
        let shape = InstanceShape::random_sizes(p, d2, &mut rng);
        let problem = random_instance(&mut rng, &shape);
        let size = rng.random_range(0..p);
        let base = random_selection(&mut rng, p, size);
        let j = (0..p).filter(|j| !base.contains(j)).nth(rng.random_range(0..p - size)).expect("free group");

        let options = EngineOptions { rebuild_interval: None, ..engine };
        let mut state = PruneState::at_selection(&problem, PruneSelection::new(base.clone(), p)?, options)?;
        let f_before = solve_direct(&problem, state.selection())?.objective;
        let shrink = state.shrink(&[j])?;
        let f_after = solve_direct(&problem, state.selection())?.objective;
        let grow = state.grow(&[j])?;
        for (k, s) in candidates.iter().enumerate() {
            worst[0][k] = worst[0][k].max(relative_error(f_before + s * shrink.half_trace, f_after));
            worst[1][k] = worst[1][k].max(relative_error(f_after + s * grow.half_trace, f_before));
        }
        engine_worst = engine_worst
            .max(relative_error(f_before + shrink.delta, f_after))
            .max(relative_error(f_after + grow.delta, f_before));
    }
    let pick = |case: usize, name: &str| -> Result<(f64, f64)> {
        let ok: Vec<usize> = (0..2).filter(|&k| worst[case][k] <= SIGN_TOLERANCE).collect();
        match ok.as_slice() {
            [k] => Ok((candidates[*k], worst[case][*k])),
            _ => Err(Error::InconsistentSigns(format!(
                "{name}: mismatch {:e} with sign +1, {:e} with sign -1",
                worst[case][0], worst[case][1]
            ))),
        }
    };
    let (case1_sign, m1) = pick(0, "case 1")?;
    let (case2_sign, m2) = pick(1, "case 2")?;
    Ok(SignReport {
        case1_sign,
        case2_sign,
        instances,
        max_mismatch: m1.max(m2),
        engine_consistent: engine_worst <= SIGN_TOLERANCE,
    })
}

impl SignReport {
    pub fn signs(&self) -> DeltaSigns {
        DeltaSigns { shrink: self.case1_sign, grow: self.case2_sign }
    }
}

/// `(f − f_opt) / |f_opt|`, or the absolute difference when `f_opt = 0`.
pub fn optimality_gap(f: f64, f_opt: f64) -> f64 {
    if f_opt == 0.0 {
        f - f_opt
    } else {
        (f - f_opt) / f_opt.abs()
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionStats {
    pub mean_objective: f64,
    pub median_gap: f64,
    pub max_gap: f64,
    pub gaps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub selection_direction: SelectionDirection,
    pub instances: usize,
    pub minimizing: DirectionStats,
    pub literal: DirectionStats,
}

impl DirectionReport {
    pub fn stats(&self, direction: SelectionDirection) -> &DirectionStats {
        match direction {
            SelectionDirection::Minimizing => &self.minimizing,
            SelectionDirection::Literal => &self.literal,
        }
    }
}

/// Runs a nested search under both rankings on brute-forceable instances and
/// keeps the one with the lower mean objective. An exact tie keeps
/// `Minimizing`.
pub fn direction_test(instances: usize, splitter: &SeedSplitter) -> Result<DirectionReport> {
    let per_instance = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = splitter.child("direction").stream(&i.to_string());
            let shape = InstanceShape::random_sizes(8, 4, &mut rng);
            let problem = random_instance(&mut rng, &shape);
            let f_opt = brute_force(&problem, 4, DEFAULT_CAP, false)?.best_objective;
            let schedule = make_schedule(PresetKind::Nested, 4, 2, 0)?;
            let run = |direction| -> Result<f64> {
                let options = SearchOptions { direction, ..SearchOptions::default() };
                Ok(run_local_search(&problem, &schedule, "nested", &options)?.objective)
            };
            Ok((run(SelectionDirection::Minimizing)?, run(SelectionDirection::Literal)?, f_opt))
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = |pick: fn(&(f64, f64, f64)) -> f64| {
        let gaps: Vec<f64> = per_instance.iter().map(|r| optimality_gap(pick(r), r.2)).collect();
        DirectionStats {
            mean_objective: per_instance.iter().map(pick).sum::<f64>() / instances.max(1) as f64,
            median_gap: median(&gaps),
            max_gap: gaps.iter().copied().fold(0.0, f64::max),
            gaps,
        }
    };
    let minimizing = stats(|r| r.0);
    let literal = stats(|r| r.1);
    let selection_direction = if literal.mean_objective < minimizing.mean_objective {
        SelectionDirection::Literal
    } else {
        SelectionDirection::Minimizing
    };
    Ok(DirectionReport { selection_direction, instances, minimizing, literal })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Greedy,
    Nested,
    NonNested,
    Mp,
    MpPlus,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Greedy, Method::Nested, Method::NonNested, Method::Mp, Method::MpPlus];

    pub fn name(self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::Nested => "nested",
            Method::NonNested => "non_nested",
            Method::Mp => "mp",
            Method::MpPlus => "mp_plus",
        }
    }

    /// Objective reached by this method with step size `t_hat` where
    /// applicable.
    pub fn run(self, problem: &QuadraticProblem, p_prime: usize, t_hat: usize) -> Result<f64> {
        let search = |preset| -> Result<f64> {
            let schedule = make_schedule(preset, p_prime, t_hat, DEFAULT_EXTRA_SWAPS)?;
            Ok(run_local_search(problem, &schedule, self.name(), &SearchOptions::default())?.objective)
        };
        match self {
            Method::Greedy => search(PresetKind::Greedy),
            Method::Nested => search(PresetKind::Nested),
            Method::NonNested => search(PresetKind::NonNested),
            Method::Mp => Ok(magnitude_prune(problem, p_prime, false)?.objective),
            Method::MpPlus => Ok(magnitude_prune(problem, p_prime, true)?.objective),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub method: Method,
    pub objective: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub optimum: f64,
    pub rows: Vec<GapRow>,
    /// `ratios[a][b] = f_a / f_b` for every pair with `f_b ≠ 0`.
    pub ratios: BTreeMap<Method, BTreeMap<Method, f64>>,
}

impl GapReport {
    pub fn objective(&self, method: Method) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method).map(|r| r.objective)
    }
}

/// Optimality gap of each method against brute force.
pub fn gap_report(problem: &QuadraticProblem, p_prime: usize, methods: &[Method], t_hat: usize) -> Result<GapReport> {
    let optimum = brute_force(problem, p_prime, DEFAULT_CAP, false)?.best_objective;
    let rows = methods
        .iter()
        .map(|&method| {
            let objective = method.run(problem, p_prime, t_hat)?;
            Ok(GapRow { method, objective, gap: optimality_gap(objective, optimum) })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ratios = BTreeMap::new();
    for a in &rows {
        let entry: &mut BTreeMap<Method, f64> = ratios.entry(a.method).or_default();
        for b in rows.iter().filter(|b| b.objective != 0.0) {
            entry.insert(b.method, a.objective / b.objective);
        }
    }
    Ok(GapReport { optimum, rows, ratios })
}

/// One instance of the gap suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub instance: usize,
    pub report: GapReport,
}

/// `instances` problems with `groups` groups of `group_size` rows, `d2`
/// outputs, pruning `p_prime` groups with every method.
pub fn gap_suite(
    instances: usize,
    groups: usize,
    group_size: usize,
    d2: usize,
    p_prime: usize,
    splitter: &SeedSplitter,
) -> Result<Vec<GapRecord>> {
    (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = splitter.child("gap").stream(&i.to_string());
            let problem = random_instance(&mut rng, &InstanceShape::uniform(groups, group_size, d2));
            Ok(GapRecord { instance: i, report: gap_report(&problem, p_prime, &Method::ALL, 2)? })
        })
        .collect()
}

/// CSV with one row per instance: optimum, then objective and gap per method.
pub fn gap_suite_csv(records: &[GapRecord]) -> String {
    let mut out = String::from("instance,optimum");
    for m in Method::ALL {
        out.push_str(&format!(",{0},{0}_gap", m.name()));
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{:e}", r.instance, r.report.optimum));
        for m in Method::ALL {
            match r.report.rows.iter().find(|row| row.method == m) {
                Some(row) => out.push_str(&format!(",{:e},{:e}", row.objective, row.gap)),
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub instances: usize,
    pub operations: usize,
    pub max_objective_deviation: f64,
    pub max_inverse_deviation: f64,
    pub max_weight_deviation: f64,
}

impl PathReport {
    pub fn max_deviation(&self) -> f64 {
        self.max_objective_deviation.max(self.max_inverse_deviation).max(self.max_weight_deviation)
    }
}

/// Random sequences of shrink, grow and swap on random instances with
/// `d₁ ≤ 64`, `d₂ ≤ 16` and group sizes 1 to 4; every step is compared
/// against a direct solve.
pub fn path_independence(
    instances: usize,
    ops_per_instance: usize,
    splitter: &SeedSplitter,
    engine: EngineOptions,
) -> Result<PathReport> {
    let results = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = splitter.child("path").stream(&i.to_string());
            let p = rng.random_range(4..=16);
            let d2 = rng.random_range(1..=16);
            let shape = InstanceShape::random_sizes(p, d2, &mut rng);
            let problem = random_instance(&mut rng, &shape);
            let mut state = PruneState::new(&problem, engine)?;
            let mut worst = [0.0f64; 3];
            for _ in 0..ops_per_instance {
                random_operation(&mut state, &mut rng)?;
                let dev = state.deviation_from_direct()?;
                worst[0] = worst[0].max(dev.objective);
                worst[1] = worst[1].max(dev.inverse);
                worst[2] = worst[2].max(dev.weights);
            }
            Ok(worst)
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |k: usize| results.iter().map(|w| w[k]).fold(0.0, f64::max);
    Ok(PathReport {
        instances,
        operations: instances * ops_per_instance,
        max_objective_deviation: col(0),
        max_inverse_deviation: col(1),
        max_weight_deviation: col(2),
    })
}

/// Applies one random shrink, grow or swap of up to three groups.
pub fn random_operation(state: &mut PruneState, rng: &mut ChaCha8Rng) -> Result<()> {
    let p = state.problem().group_count();
    let pruned: Vec<usize> = state.selection().iter().collect();
    let free: Vec<usize> = (0..p).filter(|j| !state.selection().contains(*j)).collect();
    let pick = |from: &[usize], rng: &mut ChaCha8Rng| -> Vec<usize> {
        let k = rng.random_range(1..=from.len().min(3));
        random_selection(rng, from.len(), k).into_iter().map(|i| from[i]).collect()
    };
    let op = rng.random_range(0..3);
    if (op == 0 || pruned.is_empty()) && free.len() > 1 {
        let add = pick(&free, rng);
        state.shrink(&add)?;
    } else if op == 1 || free.is_empty() || free.len() == 1 && op == 0 {
        let back = pick(&pruned, rng);
        state.grow(&back)?;
    } else {
        let back = pick(&pruned, rng);
        let add = pick(&free, rng);
        state.swap(&back, &add)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub case1_sign: Option<f64>,
    pub case2_sign: Option<f64>,
    pub selection_direction: Option<SelectionDirection>,
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

/// Instance counts for `run_verify`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifySizes {
    pub sign: usize,
    pub direction: usize,
    pub path: usize,
    pub path_ops: usize,
    pub monotonicity: usize,
    pub gap: usize,
}

impl VerifySizes {
    pub const FULL: VerifySizes =
        VerifySizes { sign: 50, direction: 50, path: 200, path_ops: 20, monotonicity: 10, gap: 100 };
    pub const QUICK: VerifySizes =
        VerifySizes { sign: 10, direction: 10, path: 20, path_ops: 20, monotonicity: 2, gap: 10 };
}

fn suite(name: &str, passed: bool, metrics: &[(&str, f64)]) -> SuiteResult {
    SuiteResult {
        name: name.to_string(),
        passed,
        metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

/// All suites. A suite that errors is recorded as failed rather than
/// aborting the rest.
pub fn run_verify(seed: u64, sizes: VerifySizes, engine: EngineOptions) -> VerifyReport {
    let splitter = SeedSplitter::new(seed);
    let mut report = VerifyReport { case1_sign: None, case2_sign: None, selection_direction: None, suites: vec![] };
    let failed = |name: &str, e: &Error| suite(name, false, &[("error_numerical", f64::from(u8::from(e.is_numerical())))]);

    match sign_test(sizes.sign, &splitter, engine) {
        Ok(s) => {
            report.case1_sign = Some(s.case1_sign);
            report.case2_sign = Some(s.case2_sign);
            let matches = s.signs() == engine.signs && s.engine_consistent;
            report.suites.push(suite(
                "signs",
                matches,
                &[("instances", s.instances as f64), ("max_mismatch", s.max_mismatch)],
            ));
        }
        Err(e) => report.suites.push(failed("signs", &e)),
    }

    match direction_test(sizes.direction, &splitter) {
        Ok(d) => {
            report.selection_direction = Some(d.selection_direction);
            let chosen = d.stats(d.selection_direction);
            let rejected = d.stats(d.selection_direction.other());
            report.suites.push(suite(
                "direction",
                d.selection_direction == SelectionDirection::RESOLVED && chosen.median_gap < rejected.median_gap,
                &[
                    ("instances", d.instances as f64),
                    ("chosen_median_gap", chosen.median_gap),
                    ("rejected_median_gap", rejected.median_gap),
                    ("chosen_mean_objective", chosen.mean_objective),
                    ("rejected_mean_objective", rejected.mean_objective),
                ],
            ));
        }
        Err(e) => report.suites.push(failed("direction", &e)),
    }

    let path_engine = EngineOptions { rebuild_interval: None, ..engine };
    match path_independence(sizes.path, sizes.path_ops, &splitter, path_engine) {
        Ok(p) => report.suites.push(suite(
            "path_independence",
            p.max_deviation() <= PATH_TOLERANCE,
            &[
                ("instances", p.instances as f64),
                ("operations", p.operations as f64),
                ("max_objective_deviation", p.max_objective_deviation),
                ("max_inverse_deviation", p.max_inverse_deviation),
                ("max_weight_deviation", p.max_weight_deviation),
            ],
        )),
        Err(e) => report.suites.push(failed("path_independence", &e)),
    }

    let mono = (0..sizes.monotonicity)
        .map(|i| {
            let mut rng = splitter.child("monotonicity").stream(&i.to_string());
            let shape = InstanceShape::random_sizes(6, 3, &mut rng);
            monotonicity_violation(&random_instance(&mut rng, &shape))
        })
        .collect::<Result<Vec<f64>>>();
    match mono {
        Ok(v) => {
            let worst = v.iter().copied().fold(0.0, f64::max);
            report.suites.push(suite(
                "monotonicity",
                worst <= 1e-10,
                &[("instances", v.len() as f64), ("max_violation", worst)],
            ));
        }
        Err(e) => report.suites.push(failed("monotonicity", &e)),
    }

    match gap_suite(sizes.gap, 8, 3, 8, 4, &splitter) {
        Ok(records) => {
            let get = |r: &GapRecord, m| r.report.objective(m).expect("all methods run");
            let n = records.len().max(1) as f64;
            let nn_le_nested = records.iter().all(|r| get(r, Method::NonNested) <= get(r, Method::Nested));
            let lower_bound = records
                .iter()
                .all(|r| r.report.rows.iter().all(|row| row.objective >= r.report.optimum - 1e-9));
            // Equal subsets reached by both methods differ only by rounding.
            let beats = records
                .iter()
                .filter(|r| {
                    let mp = get(r, Method::MpPlus);
                    get(r, Method::NonNested) <= mp + 1e-12 * mp.abs().max(1.0)
                })
                .count();
            let mean = |m| records.iter().map(|r| get(r, m)).sum::<f64>() / n;
            report.suites.push(suite(
                "gap",
                nn_le_nested && lower_bound,
                &[
                    ("instances", records.len() as f64),
                    ("non_nested_le_mp_plus_fraction", beats as f64 / n),
                    ("mean_non_nested", mean(Method::NonNested)),
                    ("mean_nested", mean(Method::Nested)),
                    ("mean_mp_plus", mean(Method::MpPlus)),
                    ("mean_mp", mean(Method::Mp)),
                ],
            ));
        }
        Err(e) => report.suites.push(failed("gap", &e)),
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{restricted_objective, subsets};
    use rand::SeedableRng;

    fn nested_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
    }

    #[test]
    fn binomials_and_combinations() {
        assert_eq!(binomial(4, 2), 6);
        assert_eq!(binomial(12, 6), 924);
        assert_eq!(binomial(3, 5), 0);
        assert_eq!(binomial(100, 50), 100891344545564193334812497256);
        let mut c = vec![0, 1];
        let mut seen = vec![c.clone()];
        while next_combination(&mut c, 4) {
            seen.push(c.clone());
        }
        assert_eq!(seen, subsets(4, 2));
    }

    #[test]
    fn brute_force_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prob = random_instance(&mut rng, &InstanceShape::uniform(4, 2, 2));
        let r = brute_force(&prob, 2, DEFAULT_CAP, true).unwrap();
        assert_eq!(r.evaluated, 6);
        assert!(r.table.unwrap().iter().all(|(_, f)| r.best_objective <= *f));

        let g = Matrix::from_rows(&[vec![3.0], vec![1.0], vec![2.0], vec![0.5]]).unwrap();
        let r = brute_force(&identity_instance(&g), 2, DEFAULT_CAP, false).unwrap();
        assert_eq!(r.best.as_slice(), &[1, 3]);

        assert!(matches!(brute_force(&prob, 2, 5, false), Err(Error::TooManySubsets { count: 6, cap: 5 })));
    }

    #[test]
    fn brute_force_table_against_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prob = random_instance(&mut rng, &InstanceShape::uniform(12, 1, 3));
        let r = brute_force(&prob, 6, DEFAULT_CAP, true).unwrap();
        let table = r.table.unwrap();
        assert_eq!(table.len(), 924);
        let h = nested_rows(prob.h().inner());
        let g = nested_rows(prob.g().inner());
        let kept: Vec<usize> = (0..12).filter(|j| !r.best.contains(*j)).collect();
        let re = restricted_objective(&h, &g, &kept);
        assert!((re - r.best_objective).abs() < 1e-9 * re.abs());
        for (s, f) in table.iter().step_by(97) {
            let kept: Vec<usize> = (0..12).filter(|j| !s.contains(j)).collect();
            assert!((restricted_objective(&h, &g, &kept) - f).abs() < 1e-9 * f.abs());
        }
    }

    #[test]
    fn identity_sign_is_half_group_energy() {
        let g = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 3.0]]).unwrap();
        let prob = identity_instance(&g);
        let mut s = PruneState::new(&prob, EngineOptions::default()).unwrap();
        let shrink = s.shrink(&[1]).unwrap();
        assert_eq!(shrink.delta, 4.5);
        let grow = s.grow(&[1]).unwrap();
        assert_eq!(grow.delta, -shrink.delta);
    }

    #[test]
    fn sign_test_resolves_and_flags_flipped_engine() {
        let splitter = SeedSplitter::new(3);
        let report = sign_test(20, &splitter, EngineOptions::default()).unwrap();
        assert_eq!(report.signs(), DeltaSigns::RESOLVED);
        assert!(report.engine_consistent);
        let flipped = EngineOptions { signs: DeltaSigns::RESOLVED.flipped(), ..EngineOptions::default() };
        let report = sign_test(20, &splitter, flipped).unwrap();
        assert_eq!(report.signs(), DeltaSigns::RESOLVED);
        assert!(!report.engine_consistent);
    }

    #[test]
    fn direction_test_on_zero_gradient_ties() {
        let prob = identity_instance(&Matrix::zeros(6, 2));
        for direction in [SelectionDirection::Minimizing, SelectionDirection::Literal] {
            let options = SearchOptions { direction, ..SearchOptions::default() };
            let schedule = make_schedule(PresetKind::Nested, 3, 2, 0).unwrap();
            assert_eq!(run_local_search(&prob, &schedule, "nested", &options).unwrap().objective, 0.0);
        }
        let report = direction_test(8, &SeedSplitter::new(4)).unwrap();
        assert_eq!(report.selection_direction, SelectionDirection::Minimizing);
    }

    #[test]
    fn gap_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prob = random_instance(&mut rng, &InstanceShape::uniform(5, 2, 2));
        for p_prime in [0, 5] {
            let r = gap_report(&prob, p_prime, &Method::ALL, 2).unwrap();
            for row in &r.rows {
                assert!(row.gap.abs() < 1e-9, "{:?} at p′={p_prime}: {}", row.method, row.gap);
            }
        }
        let r = gap_report(&prob, 2, &Method::ALL, 2).unwrap();
        assert_eq!(r.ratios[&Method::Nested][&Method::Nested], 1.0);
    }

    #[test]
    fn gap_suite_csv_layout() {
        let records = gap_suite(3, 6, 2, 3, 3, &SeedSplitter::new(6)).unwrap();
        let csv = gap_suite_csv(&records);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].split(',').count(), 12);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn monotone_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..3 {
            let shape = InstanceShape::random_sizes(5, 2, &mut rng);
            assert!(monotonicity_violation(&random_instance(&mut rng, &shape)).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn quick_verify_passes_and_is_deterministic() {
        let a = run_verify(9, VerifySizes::QUICK, EngineOptions::default());
        assert!(a.passed(), "{a:#?}");
        assert_eq!(a.case1_sign, Some(1.0));
        assert_eq!(a.case2_sign, Some(-1.0));
        let b = run_verify(9, VerifySizes::QUICK, EngineOptions::default());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let flipped = EngineOptions { signs: DeltaSigns::RESOLVED.flipped(), ..EngineOptions::default() };
        assert!(!run_verify(9, VerifySizes::QUICK, flipped).passed());
    }
}
