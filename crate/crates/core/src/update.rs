//! Incremental solver state under group removals and restorations.
//!
//! `PruneState` keeps, for the current pruned set `S` with retained rows `I`,
//! the inverse `(H_{I,I})⁻¹`, the optimal retained weights `W = (H_{I,I})⁻¹G_I`
//! and the objective `f(S)`. Changing `t` rows costs `O(t·d₁·(d₁+d₂))`:
//!
//! * removing rows `r` (shrink) reads the blocks `A`, `B`, `C` of the current
//!   inverse at the kept/removed positions and sets the new inverse to
//!   `A − B·C⁻¹·Bᵀ`, the new weights to `W_k − B·C⁻¹·W_r`;
//! * restoring rows `r` (grow) forms the Schur complement
//!   `H_rr − H_rI·inv·H_Ir`, inverts it to get the new `C` block, and assembles
//!   the enlarged inverse and weights around it;
//! * a mixed change is a shrink followed by a grow through `S ∪ added`.
//!
//! Rows inside `inv` and `W` always follow the global sorted order of `I`;
//! `position` maps a global row to its slot.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{cholesky_inner, dgemm, gather, symmetrize_in_place, without_rows, IndexSet, Matrix, SymMatrix};
use crate::problem::{scatter_rows, solve_direct, PruneSelection, QuadraticProblem};

const NOT_RETAINED: usize = usize::MAX;

/// Direction in which the half-trace term `½Tr(W_rᵀ·M·W_r)` moves the
/// objective for each update kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSigns {
    /// Sign applied when groups are pruned.
    pub shrink: f64,
    /// Sign applied when groups are restored.
    pub grow: f64,
}

impl DeltaSigns {
    /// Pruning raises the objective and restoring lowers it; this is the pair
    /// the sign oracle confirms (see `oracle::sign_test`).
    pub const RESOLVED: DeltaSigns = DeltaSigns { shrink: 1.0, grow: -1.0 };

    /// Both signs reversed. Only useful as a negative control.
    pub fn flipped(self) -> DeltaSigns {
        DeltaSigns { shrink: -self.shrink, grow: -self.grow }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EngineOptions {
    pub signs: DeltaSigns,
    /// Recompute from scratch after this many updates and check agreement.
    pub rebuild_interval: Option<usize>,
    pub rebuild_tolerance: f64,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions { signs: DeltaSigns::RESOLVED, rebuild_interval: Some(64), rebuild_tolerance: 1e-6 }
    }
}

impl EngineOptions {
    /// No periodic rebuild, so timings measure the update path alone.
    pub fn benchmark() -> Self {
        EngineOptions { rebuild_interval: None, ..Self::default() }
    }
}

/// Objective change reported by a single shrink or grow.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStep {
    /// `½Tr(W_rᵀ C⁻¹ W_r)` for a shrink, `½Tr(W_rᵀ Σ W_r)` for a grow, where
    /// `Σ` is the Schur complement; always nonnegative.
    pub half_trace: f64,
    /// Signed change applied to the objective.
    pub delta: f64,
}

/// Relative deviation of an incremental state from a direct recompute.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deviation {
    pub objective: f64,
    pub inverse: f64,
    pub weights: f64,
}

impl Deviation {
    pub fn max(&self) -> f64 {
        self.objective.max(self.inverse).max(self.weights)
    }
}

/// `|a − b| / max(|b|, 1)`: relative for large values, absolute near zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    (a - b).norm() / b.norm().max(1.0)
}

/// `L⁻¹·b` for lower-triangular `L` with a positive diagonal.
fn lower_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b).expect("Cholesky factor has a positive diagonal")
}

/// Appends one merged column to `out`: `new[j]` lands at slot `new_at[j]`
/// (ascending) and `old` fills the other slots in order.
fn merge_rows(out: &mut Vec<f64>, old: &[f64], new: &[f64], new_at: &[usize]) {
    let mut read = 0;
    let mut write = 0;
    for (&slot, &v) in new_at.iter().zip(new) {
        let run = slot - write;
        out.extend_from_slice(&old[read..read + run]);
        out.push(v);
        read += run;
        write = slot + 1;
    }
    out.extend_from_slice(&old[read..]);
}

#[derive(Clone, Debug)]
pub struct PruneState<'p> {
    problem: &'p QuadraticProblem,
    options: EngineOptions,
    selection: PruneSelection,
    retained: IndexSet,
    position: Vec<usize>,
    inv: DMatrix<f64>,
    weights: DMatrix<f64>,
    objective: f64,
    updates_since_rebuild: usize,
}

impl<'p> PruneState<'p> {
    /// Nothing pruned: `inv = H⁻¹`, `W = H⁻¹G`.
    pub fn new(problem: &'p QuadraticProblem, options: EngineOptions) -> Result<Self> {
        Self::at_selection(problem, PruneSelection::empty(), options)
    }

    /// Starts from an arbitrary selection by solving it directly.
    pub fn at_selection(
        problem: &'p QuadraticProblem,
        selection: PruneSelection,
        options: EngineOptions,
    ) -> Result<Self> {
        let sol = solve_direct(problem, &selection)?;
        let mut state = PruneState {
            problem,
            options,
            selection,
            retained: sol.retained,
            position: Vec::new(),
            inv: sol.inverse.into_inner(),
            weights: sol.weights.into_inner(),
            objective: sol.objective,
            updates_since_rebuild: 0,
        };
        state.reindex();
        Ok(state)
    }

    pub fn problem(&self) -> &'p QuadraticProblem {
        self.problem
    }

    pub fn options(&self) -> &EngineOptions {
        &self.options
    }

    pub fn selection(&self) -> &PruneSelection {
        &self.selection
    }

    pub fn retained(&self) -> &IndexSet {
        &self.retained
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn inverse(&self) -> SymMatrix {
        SymMatrix::symmetrized(self.inv.clone())
    }

    /// Optimal weights over the retained rows, `|I|×d₂`.
    pub fn weights(&self) -> Matrix {
        Matrix::from_inner(self.weights.clone())
    }

    /// Optimal weights at full `d₁×d₂` shape with pruned rows zeroed.
    pub fn full_weights(&self) -> Matrix {
        scatter_rows(&self.weights(), &self.retained, self.problem.d1())
    }

    fn reindex(&mut self) {
        self.position.clear();
        self.position.resize(self.problem.d1(), NOT_RETAINED);
        for (pos, row) in self.retained.iter().enumerate() {
            self.position[row] = pos;
        }
    }

    fn positions_of_groups(&self, groups: &[usize]) -> Result<Vec<usize>> {
        let partition = self.problem.partition();
        let mut pos = Vec::new();
        for &j in groups {
            pos.extend(partition.group(j).iter().map(|row| self.position[row]));
        }
        pos.sort_unstable();
        Ok(pos)
    }

    fn validate(&self, groups: &[usize], want_pruned: bool) -> Result<()> {
        let partition = self.problem.partition();
        for (i, &j) in groups.iter().enumerate() {
            partition.check_group(j)?;
            if groups[..i].contains(&j) {
                return Err(Error::InvalidPartition(format!("group {j} listed twice")));
            }
            match (want_pruned, self.selection.contains(j)) {
                (false, true) => return Err(Error::GroupAlreadyPruned(j)),
                (true, false) => return Err(Error::GroupNotPruned(j)),
                _ => {}
            }
        }
        Ok(())
    }

    /// Prunes `groups` (none of which may already be pruned).
    pub fn shrink(&mut self, groups: &[usize]) -> Result<UpdateStep> {
        self.validate(groups, false)?;
        if groups.is_empty() {
            return Ok(UpdateStep::default());
        }
        let removed = self.positions_of_groups(groups)?;
        let n = self.retained.len();
        let mut is_removed = vec![false; n];
        for &p in &removed {
            is_removed[p] = true;
        }
        let kept: Vec<usize> = (0..n).filter(|&p| !is_removed[p]).collect();

        // With C = L·Lᵀ: B·C⁻¹·Bᵀ = YᵀY and B·C⁻¹·W_r = Yᵀ·V for
        // Y = L⁻¹·Bᵀ, V = L⁻¹·W_r.
        let c = gather(&self.inv, &removed, &removed);
        let l = cholesky_inner(&c).map_err(|_| Error::SingularBlock { groups: groups.to_vec() })?.unpack();
        let bt = gather(&self.inv, &removed, &kept);
        let y = lower_solve(&l, &bt);
        let v = lower_solve(&l, &self.weights.select_rows(&removed));

        let mut inv = without_rows(&self.inv, &removed, true);
        dgemm(-1.0, &y, true, &y, false, 1.0, &mut inv);
        let mut weights = without_rows(&self.weights, &removed, false);
        dgemm(-1.0, &y, true, &v, false, 1.0, &mut weights);

        let half_trace = 0.5 * v.norm_squared();
        let delta = self.options.signs.shrink * half_trace;

        let retained: Vec<usize> = kept.iter().map(|&p| self.retained.as_slice()[p]).collect();
        self.retained = IndexSet::from_sorted_unchecked(retained);
        self.inv = inv;
        self.weights = weights;
        self.objective += delta;
        for &j in groups {
            self.selection.insert(j);
        }
        self.reindex();
        self.after_update()?;
        Ok(UpdateStep { half_trace, delta })
    }

    /// Restores `groups` (all of which must currently be pruned).
    pub fn grow(&mut self, groups: &[usize]) -> Result<UpdateStep> {
        self.validate(groups, true)?;
        if groups.is_empty() {
            return Ok(UpdateStep::default());
        }
        let problem = self.problem;
        let added = problem.partition().rows_of(groups)?;
        let added = added.as_slice();
        let kept = self.retained.as_slice();
        let h = problem.h().inner();
        let (t, n_old) = (added.len(), kept.len());

        // K = H_rI·inv; Schur complement Σ = H_rr − K·H_Ir = L·Lᵀ.
        let h_rk = gather(h, added, kept);
        let mut k = DMatrix::zeros(t, n_old);
        dgemm(1.0, &h_rk, false, &self.inv, false, 0.0, &mut k);
        let mut schur = gather(h, added, added);
        dgemm(-1.0, &k, false, &h_rk, true, 1.0, &mut schur);
        symmetrize_in_place(&mut schur);
        let chol = cholesky_inner(&schur).map_err(|_| Error::SingularBlock { groups: groups.to_vec() })?;

        // New restored rows: Σ⁻¹·(G_r − H_rI·W).
        let mut resid = problem.g().inner().select_rows(added);
        dgemm(-1.0, &h_rk, false, &self.weights, false, 1.0, &mut resid);
        let w_r = chol.solve(&resid);
        let half_trace = 0.5 * resid.dot(&w_r);
        let delta = self.options.signs.grow * half_trace;

        // Blocks of the enlarged inverse: C = Σ⁻¹, Bᵀ = −C·K and
        // A = inv + Kᵀ·C·K = inv + ZᵀZ with Z = L⁻¹·K.
        let c = {
            let mut c = chol.inverse();
            symmetrize_in_place(&mut c);
            c
        };
        let ck = chol.solve(&k);
        let z = lower_solve(&chol.unpack(), &k);
        let mut a = std::mem::take(&mut self.inv);
        dgemm(1.0, &z, true, &z, false, 1.0, &mut a);
        let mut w_k = std::mem::take(&mut self.weights);
        dgemm(-1.0, &k, true, &w_r, false, 1.0, &mut w_k);

        // Merge old and new rows into global sorted order. `new_at[j]` is the
        // merged slot of restored row `j`; old rows fill the remaining slots.
        let m = n_old + t;
        let mut new_at = Vec::with_capacity(t);
        let mut retained = Vec::with_capacity(m);
        let mut i = 0;
        for (j, &row) in added.iter().enumerate() {
            while i < n_old && kept[i] < row {
                retained.push(kept[i]);
                i += 1;
            }
            new_at.push(i + j);
            retained.push(row);
        }
        retained.extend_from_slice(&kept[i..]);

        let mut inv = Vec::with_capacity(m * m);
        let mut new_part = vec![0.0; t];
        let mut old_col = 0;
        for slot in 0..m {
            match new_at.binary_search(&slot) {
                Ok(x) => {
                    let old_part: Vec<f64> = ck.row(x).iter().map(|v| -v).collect();
                    new_part.copy_from_slice(c.column(x).as_slice());
                    merge_rows(&mut inv, &old_part, &new_part, &new_at);
                }
                Err(_) => {
                    for (x, v) in new_part.iter_mut().enumerate() {
                        *v = -ck[(x, old_col)];
                    }
                    merge_rows(&mut inv, a.column(old_col).as_slice(), &new_part, &new_at);
                    old_col += 1;
                }
            }
        }
        let d2 = w_k.ncols();
        let mut weights = Vec::with_capacity(m * d2);
        for col in 0..d2 {
            new_part.copy_from_slice(w_r.column(col).as_slice());
            merge_rows(&mut weights, w_k.column(col).as_slice(), &new_part, &new_at);
        }

        self.retained = IndexSet::from_sorted_unchecked(retained);
        self.inv = DMatrix::from_vec(m, m, inv);
        self.weights = DMatrix::from_vec(m, d2, weights);
        self.objective += delta;
        for &g in groups {
            self.selection.remove(g);
        }
        self.reindex();
        self.after_update()?;
        Ok(UpdateStep { half_trace, delta })
    }

    /// Moves to `(S \ restore) ∪ prune` by pruning first, then restoring.
    ///
    /// On a numerical failure in the restore half the state is left valid at
    /// `S ∪ prune`.
    pub fn swap(&mut self, restore: &[usize], prune: &[usize]) -> Result<()> {
        self.validate(restore, true)?;
        self.validate(prune, false)?;
        self.shrink(prune)?;
        self.grow(restore)?;
        Ok(())
    }

    /// `f(S ∪ {j}) − f(S)` from the `C` block of the current inverse at `j`'s
    /// rows; touches only `|Q_j|²` inverse entries and `|Q_j|` weight rows.
    pub fn score_removal(&self, j: usize) -> Result<f64> {
        self.validate(&[j], false)?;
        let pos = self.positions_of_groups(&[j])?;
        let c = gather(&self.inv, &pos, &pos);
        let chol = cholesky_inner(&c).map_err(|_| Error::SingularBlock { groups: vec![j] })?;
        let w_r = self.weights.select_rows(&pos);
        Ok(0.5 * w_r.dot(&chol.solve(&w_r)))
    }

    /// `f(S) − f(S \ {j})` via the Schur complement at `j`'s rows.
    pub fn score_restoration(&self, j: usize) -> Result<f64> {
        self.validate(&[j], true)?;
        let added = self.problem.partition().group(j).as_slice();
        let kept = self.retained.as_slice();
        let h = self.problem.h().inner();
        let h_rk = gather(h, added, kept);
        let mut schur = gather(h, added, added);
        let mut k = DMatrix::zeros(added.len(), kept.len());
        dgemm(1.0, &h_rk, false, &self.inv, false, 0.0, &mut k);
        dgemm(-1.0, &k, false, &h_rk, true, 1.0, &mut schur);
        symmetrize_in_place(&mut schur);
        let chol = cholesky_inner(&schur).map_err(|_| Error::SingularBlock { groups: vec![j] })?;
        let mut resid = self.problem.g().inner().select_rows(added);
        dgemm(-1.0, &h_rk, false, &self.weights, false, 1.0, &mut resid);
        Ok(0.5 * resid.dot(&chol.solve(&resid)))
    }

    /// Relative deviation of the maintained quantities from `solve_direct`.
    pub fn deviation_from_direct(&self) -> Result<Deviation> {
        let sol = solve_direct(self.problem, &self.selection)?;
        Ok(Deviation {
            objective: relative_error(self.objective, sol.objective),
            inverse: relative_frobenius(&self.inv, sol.inverse.inner()),
            weights: relative_frobenius(&self.weights, sol.weights.inner()),
        })
    }

    fn after_update(&mut self) -> Result<()> {
        self.updates_since_rebuild += 1;
        let Some(interval) = self.options.rebuild_interval else {
            return Ok(());
        };
        if self.updates_since_rebuild < interval {
            return Ok(());
        }
        let sol = solve_direct(self.problem, &self.selection)?;
        let checks = [
            ("objective", relative_error(self.objective, sol.objective)),
            ("inverse", relative_frobenius(&self.inv, sol.inverse.inner())),
            ("weights", relative_frobenius(&self.weights, sol.weights.inner())),
        ];
        if let Some(&(what, deviation)) = checks.iter().find(|(_, d)| !(*d <= self.options.rebuild_tolerance)) {
            return Err(Error::Drift { what, deviation });
        }
        self.inv = sol.inverse.into_inner();
        self.weights = sol.weights.into_inner();
        self.objective = sol.objective;
        self.updates_since_rebuild = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::SymMatrix;
    use crate::oracle::{random_instance, InstanceShape};
    use crate::problem::GroupPartition;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_problem(g: &[f64], group: usize) -> QuadraticProblem {
        let d1 = g.len();
        QuadraticProblem::new(
            SymMatrix::identity(d1),
            Matrix::from_row_major(d1, 1, g).unwrap(),
            GroupPartition::contiguous(d1, group, crate::problem::PartitionKind::Custom).unwrap(),
            0.0,
        )
        .unwrap()
    }

    fn assert_matches_direct(state: &PruneState, tol: f64) {
        let dev = state.deviation_from_direct().unwrap();
        assert!(dev.max() < tol, "deviation {dev:?} at {:?}", state.selection());
    }

    #[test]
    fn init_identity_and_diagonal() {
        let prob = identity_problem(&[1.0, 2.0], 1);
        let s = PruneState::new(&prob, EngineOptions::default()).unwrap();
        assert_abs_diff_eq!(s.objective(), -2.5, epsilon = 1e-15);
        assert_eq!(s.weights(), *prob.g());

        let prob = QuadraticProblem::new(
            SymMatrix::from_diagonal(&[2.0, 8.0]),
            Matrix::from_rows(&[vec![2.0], vec![4.0]]).unwrap(),
            GroupPartition::dense(2),
            0.0,
        )
        .unwrap();
        let s = PruneState::new(&prob, EngineOptions::default()).unwrap();
        assert_abs_diff_eq!(s.weights().get(0, 0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.weights().get(1, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.objective(), -2.0, epsilon = 1e-15);
    }

    #[test]
    fn init_random_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prob = random_instance(&mut rng, &InstanceShape::uniform(20, 1, 5));
        let s = PruneState::new(&prob, EngineOptions::default()).unwrap();
        assert_matches_direct(&s, 1e-8);
    }

    #[test]
    fn empty_updates_are_noops() {
        let prob = identity_problem(&[1.0, 2.0, 3.0], 1);
        let mut s = PruneState::new(&prob, EngineOptions::default()).unwrap();
        let before = s.clone();
        assert_eq!(s.shrink(&[]).unwrap(), UpdateStep::default());
        assert_eq!(s.grow(&[]).unwrap(), UpdateStep::default());
        s.swap(&[], &[]).unwrap();
        assert_eq!(s.objective(), before.objective());
        assert_eq!(s.inv, before.inv);
    }

    #[test]
    fn identity_hessian_shrink_decouples() {
        let prob = identity_problem(&[1.0, 2.0, 3.0, 4.0], 2);
        let mut s = PruneState::new(&prob, EngineOptions::default()).unwrap();
        let step = s.shrink(&[1]).unwrap();
        assert_abs_diff_eq!(step.delta, 0.5 * (9.0 + 16.0), epsilon = 1e-14);
        assert_eq!(s.weights().to_row_major(), vec![1.0, 2.0]);
        assert_eq!(s.retained().as_slice(), &[0, 1]);
    }

    #[test]
    fn shrink_grow_swap_match_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prob = random_instance(&mut rng, &InstanceShape::uniform(8, 3, 4));
        let mut s = PruneState::new(&prob, EngineOptions::default()).unwrap();
        s.shrink(&[2, 5]).unwrap();
        assert_matches_direct(&s, 1e-8);
        s.shrink(&[0]).unwrap();
        s.grow(&[5]).unwrap();
        assert_eq!(s.selection().as_slice(), &[0, 2]);
        assert_matches_direct(&s, 1e-8);
        s.swap(&[2], &[7]).unwrap();
        assert_eq!(s.selection().as_slice(), &[0, 7]);
        assert_matches_direct(&s, 1e-8);
    }

    #[test]
    fn round_trips_restore_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prob = random_instance(&mut rng, &InstanceShape::uniform(6, 2, 3));
        let mut s = PruneState::new(&prob, EngineOptions::default()).unwrap();
        s.shrink(&[1]).unwrap();
        let start = s.clone();
        s.shrink(&[4]).unwrap();
        s.grow(&[4]).unwrap();
        assert!(relative_error(s.objective(), start.objective()) < 1e-7);
        assert!(relative_frobenius(&s.inv, &start.inv) < 1e-7);
        assert!(relative_frobenius(&s.weights, &start.weights) < 1e-7);
        s.swap(&[1], &[3]).unwrap();
        s.swap(&[3], &[1]).unwrap();
        assert!(relative_error(s.objective(), start.objective()) < 1e-7);
        assert!(relative_frobenius(&s.inv, &start.inv) < 1e-7);
    }

    #[test]
    fn scores_match_direct_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prob = random_instance(&mut rng, &InstanceShape::uniform(7, 2, 3));
        let mut s = PruneState::new(&prob, EngineOptions::default()).unwrap();
        s.shrink(&[1, 4]).unwrap();
        let f = solve_direct(&prob, s.selection()).unwrap().objective;
        for j in 0..7 {
            let (score, other) = if s.selection().contains(j) {
                (s.score_restoration(j).unwrap(), s.selection().swapped(&[j], &[]))
            } else {
                (s.score_removal(j).unwrap(), s.selection().swapped(&[], &[j]))
            };
            let g = solve_direct(&prob, &other).unwrap().objective;
            assert!(((f - g).abs() - score).abs() < 1e-9 * (1.0 + f.abs()), "group {j}");
            assert!(score >= -1e-10);
        }
    }

    #[test]
    fn identity_scores_are_group_energy() {
        let prob = identity_problem(&[1.0, 2.0, 3.0, 0.0], 2);
        let mut s = PruneState::new(&prob, EngineOptions::default()).unwrap();
        assert_abs_diff_eq!(s.score_removal(0).unwrap(), 2.5, epsilon = 1e-14);
        assert_eq!(s.score_removal(1).unwrap(), 4.5);
        s.shrink(&[0]).unwrap();
        assert_abs_diff_eq!(s.score_restoration(0).unwrap(), 2.5, epsilon = 1e-14);

        let zero = identity_problem(&[0.0, 0.0, 5.0], 1);
        let s = PruneState::new(&zero, EngineOptions::default()).unwrap();
        assert_eq!(s.score_removal(1).unwrap(), 0.0);
    }

    #[test]
    fn restoring_only_pruned_group_scores_full_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prob = random_instance(&mut rng, &InstanceShape::uniform(5, 2, 2));
        let mut s = PruneState::new(&prob, EngineOptions::default()).unwrap();
        let f0 = s.objective();
        s.shrink(&[3]).unwrap();
        assert!((s.score_restoration(3).unwrap() - (s.objective() - f0)).abs() < 1e-10);
    }

    #[test]
    fn precondition_errors() {
        let prob = identity_problem(&[1.0, 2.0, 3.0], 1);
        let mut s = PruneState::new(&prob, EngineOptions::default()).unwrap();
        s.shrink(&[0]).unwrap();
        assert!(matches!(s.shrink(&[0]), Err(Error::GroupAlreadyPruned(0))));
        assert!(matches!(s.grow(&[1]), Err(Error::GroupNotPruned(1))));
        assert!(matches!(s.score_removal(0), Err(Error::GroupAlreadyPruned(0))));
        assert!(matches!(s.score_restoration(2), Err(Error::GroupNotPruned(2))));
        assert!(matches!(s.shrink(&[9]), Err(Error::InvalidGroupIndex { .. })));
        assert!(s.shrink(&[1, 1]).is_err());
        // A failed validation leaves the state untouched.
        assert_eq!(s.selection().as_slice(), &[0]);
    }

    #[test]
    fn prune_everything_then_restore() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prob = random_instance(&mut rng, &InstanceShape::uniform(4, 2, 3));
        let mut s = PruneState::new(&prob, EngineOptions::default()).unwrap();
        let f0 = s.objective();
        s.shrink(&[0, 1, 2, 3]).unwrap();
        assert!(s.objective().abs() < 1e-9 * f0.abs());
        assert!(s.retained().is_empty());
        s.grow(&[2]).unwrap();
        assert_matches_direct(&s, 1e-8);
        s.grow(&[0, 1, 3]).unwrap();
        assert!(relative_error(s.objective(), f0) < 1e-9);
    }

    #[test]
    fn long_random_walk_with_rebuilds() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let prob = random_instance(&mut rng, &InstanceShape::uniform(10, 3, 4));
        let opts = EngineOptions { rebuild_interval: Some(16), ..EngineOptions::default() };
        let mut s = PruneState::new(&prob, opts).unwrap();
        for _ in 0..150 {
            let pruned: Vec<usize> = s.selection().iter().collect();
            let free: Vec<usize> = (0..10).filter(|j| !s.selection().contains(*j)).collect();
            let op = rng.random_range(0..3);
            if op == 0 && free.len() > 1 {
                s.shrink(&[free[rng.random_range(0..free.len())]]).unwrap();
            } else if op == 1 && !pruned.is_empty() {
                s.grow(&[pruned[rng.random_range(0..pruned.len())]]).unwrap();
            } else if !pruned.is_empty() && !free.is_empty() {
                let a = pruned[rng.random_range(0..pruned.len())];
                let b = free[rng.random_range(0..free.len())];
                s.swap(&[a], &[b]).unwrap();
            }
        }
        assert_matches_direct(&s, 1e-7);
    }

    #[test]
    fn flipped_signs_trip_the_rebuild_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prob = random_instance(&mut rng, &InstanceShape::uniform(6, 2, 2));
        let opts = EngineOptions {
            signs: DeltaSigns::RESOLVED.flipped(),
            rebuild_interval: Some(1),
            ..EngineOptions::default()
        };
        let mut s = PruneState::new(&prob, opts).unwrap();
        assert!(matches!(s.shrink(&[2]), Err(Error::Drift { what: "objective", .. })));
    }
}
