//! The grouped pruning instance and its direct (non-incremental) evaluation.
//!
//! A layer's pruning problem is `min ½Tr(WᵀHW) − Tr(GᵀW)` over weights `W`
//! (`d₁×d₂`) whose rows are partitioned into groups; pruning a group forces
//! all of its rows to zero. For a pruned set `S` the optimal objective is
//! `f(S) = −½Tr(G_Iᵀ (H_{I,I})⁻¹ G_I)` where `I` are the retained rows.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{self, IndexSet, Matrix, SymMatrix};

/// Layout that produced a partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    /// One group per weight row (input neuron).
    Dense,
    /// One group per input channel: `k_H·k_W` consecutive rows.
    Conv,
    /// One group per attention head: `D_head` consecutive rows.
    Attention,
    /// Explicit groups supplied by the caller.
    Custom,
}

/// Disjoint, non-empty row groups covering `0..d1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupPartition {
    d1: usize,
    kind: PartitionKind,
    groups: Vec<IndexSet>,
    group_of_row: Vec<usize>,
}

impl GroupPartition {
    pub fn dense(d1: usize) -> Self {
        Self::contiguous(d1, 1, PartitionKind::Dense).expect("unit groups always tile")
    }

    /// `channels` groups of `kernel_area` consecutive rows.
    pub fn conv(channels: usize, kernel_area: usize) -> Result<Self> {
        Self::contiguous(channels * kernel_area, kernel_area, PartitionKind::Conv)
    }

    /// `heads` groups of `rows / heads` consecutive rows.
    pub fn attention(rows: usize, heads: usize) -> Result<Self> {
        if heads == 0 || rows % heads != 0 {
            return Err(Error::NotDivisible { rows, heads });
        }
        Self::contiguous(rows, rows / heads, PartitionKind::Attention)
    }

    /// Contiguous runs of `group_size` rows.
    pub fn contiguous(d1: usize, group_size: usize, kind: PartitionKind) -> Result<Self> {
        if group_size == 0 || d1 % group_size != 0 {
            return Err(Error::InvalidPartition(format!(
                "{d1} rows cannot be split into groups of {group_size}"
            )));
        }
        let groups = (0..d1 / group_size)
            .map(|j| IndexSet::from_sorted_unchecked((j * group_size..(j + 1) * group_size).collect()))
            .collect();
        Self::from_groups(d1, groups, kind)
    }

    /// Validates explicit groups; each list is sorted, duplicates rejected.
    pub fn custom(d1: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let groups = groups
            .into_iter()
            .map(|g| {
                let len = g.len();
                let set = IndexSet::from_unsorted(g, d1)?;
                if set.len() != len {
                    return Err(Error::InvalidPartition("group lists a row twice".into()));
                }
                Ok(set)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_groups(d1, groups, PartitionKind::Custom)
    }

    fn from_groups(d1: usize, groups: Vec<IndexSet>, kind: PartitionKind) -> Result<Self> {
        let mut group_of_row = vec![usize::MAX; d1];
        for (j, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::InvalidPartition(format!("group {j} is empty")));
            }
            for row in g.iter() {
                if row >= d1 {
                    return Err(Error::IndexOutOfRange { index: row, bound: d1 });
                }
                if group_of_row[row] != usize::MAX {
                    return Err(Error::InvalidPartition(format!(
                        "row {row} belongs to groups {} and {j}",
                        group_of_row[row]
                    )));
                }
                group_of_row[row] = j;
            }
        }
        if let Some(row) = group_of_row.iter().position(|&g| g == usize::MAX) {
            return Err(Error::InvalidPartition(format!("row {row} is not covered")));
        }
        Ok(GroupPartition { d1, kind, groups, group_of_row })
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn kind(&self) -> PartitionKind {
        self.kind
    }

    /// Number of groups `p`.
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group(&self, j: usize) -> &IndexSet {
        &self.groups[j]
    }

    pub fn groups(&self) -> &[IndexSet] {
        &self.groups
    }

    pub fn group_of_row(&self, row: usize) -> usize {
        self.group_of_row[row]
    }

    /// Common group size, if all groups have the same size.
    pub fn uniform_group_size(&self) -> Option<usize> {
        let first = self.groups.first()?.len();
        self.groups.iter().all(|g| g.len() == first).then_some(first)
    }

    pub(crate) fn check_group(&self, j: usize) -> Result<()> {
        if j >= self.len() {
            return Err(Error::InvalidGroupIndex { index: j, groups: self.len() });
        }
        Ok(())
    }

    /// Sorted rows of the listed groups.
    pub fn rows_of(&self, groups: &[usize]) -> Result<IndexSet> {
        let mut rows = Vec::new();
        for &j in groups {
            self.check_group(j)?;
            rows.extend(self.groups[j].iter());
        }
        IndexSet::from_unsorted(rows, self.d1)
    }
}

/// Sorted set of pruned group indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PruneSelection(Vec<usize>);

impl PruneSelection {
    pub fn empty() -> Self {
        PruneSelection(Vec::new())
    }

    pub fn new(mut groups: Vec<usize>, p: usize) -> Result<Self> {
        groups.sort_unstable();
        let before = groups.len();
        groups.dedup();
        if groups.len() != before {
            return Err(Error::InvalidPartition("selection lists a group twice".into()));
        }
        if let Some(&bad) = groups.iter().find(|&&j| j >= p) {
            return Err(Error::InvalidGroupIndex { index: bad, groups: p });
        }
        Ok(PruneSelection(groups))
    }

    pub fn all(p: usize) -> Self {
        PruneSelection((0..p).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub(crate) fn insert(&mut self, j: usize) {
        if let Err(pos) = self.0.binary_search(&j) {
            self.0.insert(pos, j);
        }
    }

    pub(crate) fn remove(&mut self, j: usize) {
        if let Ok(pos) = self.0.binary_search(&j) {
            self.0.remove(pos);
        }
    }

    /// `(self \ remove) ∪ add`.
    pub fn swapped(&self, remove: &[usize], add: &[usize]) -> PruneSelection {
        let mut out = self.clone();
        for &j in remove {
            out.remove(j);
        }
        for &j in add {
            out.insert(j);
        }
        out
    }

    pub fn is_subset_of(&self, other: &PruneSelection) -> bool {
        self.iter().all(|j| other.contains(j))
    }
}

/// One layer's pruning instance: `min ½Tr(WᵀHW) − Tr(GᵀW) + const_term`.
#[derive(Clone, Debug)]
pub struct QuadraticProblem {
    h: SymMatrix,
    g: Matrix,
    partition: GroupPartition,
    const_term: f64,
    samples: Option<usize>,
}

impl QuadraticProblem {
    /// Validates shapes and that `h` factors.
    pub fn new(h: SymMatrix, g: Matrix, partition: GroupPartition, const_term: f64) -> Result<Self> {
        if h.dim() != partition.d1() || g.rows() != partition.d1() {
            return Err(Error::ShapeMismatch(format!(
                "H is {0}x{0}, G has {1} rows, partition covers {2} rows",
                h.dim(),
                g.rows(),
                partition.d1()
            )));
        }
        if !const_term.is_finite() {
            return Err(Error::NonFinite { row: 0, col: 0 });
        }
        matrix::cholesky(&h)?;
        Ok(QuadraticProblem { h, g, partition, const_term, samples: None })
    }

    /// Records the calibration sample count used to build `H` and `G`.
    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples = Some(samples);
        self
    }

    pub fn h(&self) -> &SymMatrix {
        &self.h
    }

    pub fn g(&self) -> &Matrix {
        &self.g
    }

    pub fn partition(&self) -> &GroupPartition {
        &self.partition
    }

    pub fn const_term(&self) -> f64 {
        self.const_term
    }

    pub fn samples(&self) -> Option<usize> {
        self.samples
    }

    pub fn d1(&self) -> usize {
        self.partition.d1()
    }

    pub fn d2(&self) -> usize {
        self.g.cols()
    }

    /// Number of groups `p`.
    pub fn group_count(&self) -> usize {
        self.partition.len()
    }

    /// Checks the selection against this problem's group count.
    pub fn selection(&self, groups: Vec<usize>) -> Result<PruneSelection> {
        PruneSelection::new(groups, self.group_count())
    }

    /// The unpruned optimum `H⁻¹G` (equals the dense weights when `H`, `G`
    /// were built from calibration data of the dense layer itself).
    pub fn dense_optimum(&self) -> Result<Matrix> {
        Ok(solve_direct(self, &PruneSelection::empty())?.weights)
    }

    /// `½Tr(WᵀHW) − Tr(GᵀW)` for a full `d₁×d₂` weight matrix.
    pub fn objective_at(&self, w: &Matrix) -> Result<f64> {
        if w.rows() != self.d1() || w.cols() != self.d2() {
            return Err(Error::ShapeMismatch(format!(
                "weights are {}x{}, problem is {}x{}",
                w.rows(),
                w.cols(),
                self.d1(),
                self.d2()
            )));
        }
        let hw = self.h.inner() * w.inner();
        Ok(0.5 * w.inner().dot(&hw) - self.g.inner().dot(w.inner()))
    }
}

/// Rows not forced to zero by `selection`.
pub fn retained_indices(partition: &GroupPartition, selection: &PruneSelection) -> Result<IndexSet> {
    for j in selection.iter() {
        partition.check_group(j)?;
    }
    let rows = (0..partition.d1())
        .filter(|&row| !selection.contains(partition.group_of_row(row)))
        .collect();
    Ok(IndexSet::from_sorted_unchecked(rows))
}

/// Direct solution of the restricted quadratic for one selection.
#[derive(Clone, Debug)]
pub struct DirectSolution {
    pub retained: IndexSet,
    /// `(H_{I,I})⁻¹`.
    pub inverse: SymMatrix,
    /// Optimal weights over the retained rows, `|I|×d₂`.
    pub weights: Matrix,
    pub objective: f64,
}

impl DirectSolution {
    /// Optimal weights at full `d₁×d₂` shape with pruned rows zeroed.
    pub fn full_weights(&self, d1: usize) -> Matrix {
        scatter_rows(&self.weights, &self.retained, d1)
    }
}

/// `(f(S), W_retained)` by factoring `H_{I,I}` from scratch.
pub fn solve_direct(problem: &QuadraticProblem, selection: &PruneSelection) -> Result<DirectSolution> {
    let retained = retained_indices(problem.partition(), selection)?;
    let d2 = problem.d2();
    if retained.is_empty() {
        return Ok(DirectSolution {
            retained,
            inverse: SymMatrix::identity(0),
            weights: Matrix::zeros(0, d2),
            objective: 0.0,
        });
    }
    let block = matrix::principal_block(problem.h(), &retained)?;
    let chol = matrix::cholesky(&block)?;
    let g = problem.g().select_rows(&retained)?;
    let weights = chol.solve(&g);
    let objective = -0.5 * g.inner().dot(weights.inner());
    Ok(DirectSolution { retained, inverse: chol.inverse(), weights, objective })
}

/// `f(S) + const_term`: the layer reconstruction error when the problem was
/// built from calibration data.
pub fn reconstruction_loss(problem: &QuadraticProblem, selection: &PruneSelection) -> Result<f64> {
    Ok(solve_direct(problem, selection)?.objective + problem.const_term())
}

/// Places `rows_of_w` at the given global rows of a zero `d1×d2` matrix.
pub fn scatter_rows(w: &Matrix, rows: &IndexSet, d1: usize) -> Matrix {
    let mut full = DMatrix::zeros(d1, w.cols());
    for (pos, row) in rows.iter().enumerate() {
        full.row_mut(row).copy_from(&w.inner().row(pos));
    }
    Matrix::from_inner(full)
}

/// Frobenius norm of each group's rows of a `d₁×d₂` weight matrix.
pub fn group_norms(partition: &GroupPartition, w: &Matrix) -> Vec<f64> {
    partition
        .groups()
        .iter()
        .map(|g| g.iter().map(|r| w.inner().row(r).norm_squared()).sum::<f64>().sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{random_instance, InstanceShape};
    use crate::reference::{gauss_solve, subsets};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_instance() -> QuadraticProblem {
        QuadraticProblem::new(
            SymMatrix::identity(2),
            Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
            GroupPartition::dense(2),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn retained_rows_follow_selection() {
        let part = GroupPartition::contiguous(6, 2, PartitionKind::Conv).unwrap();
        let s = PruneSelection::new(vec![1], 3).unwrap();
        assert_eq!(retained_indices(&part, &s).unwrap().as_slice(), &[0, 1, 4, 5]);
        assert_eq!(retained_indices(&part, &PruneSelection::empty()).unwrap(), IndexSet::all(6));
        assert!(retained_indices(&part, &PruneSelection::all(3)).unwrap().is_empty());
        let bad = PruneSelection(vec![3]);
        assert!(matches!(
            retained_indices(&part, &bad),
            Err(Error::InvalidGroupIndex { index: 3, groups: 3 })
        ));
    }

    #[test]
    fn partitions_validate() {
        assert_eq!(GroupPartition::attention(8, 2).unwrap().group(1).as_slice(), &[4, 5, 6, 7]);
        assert!(matches!(GroupPartition::attention(8, 3), Err(Error::NotDivisible { .. })));
        assert!(GroupPartition::custom(4, vec![vec![0, 1], vec![1, 2, 3]]).is_err());
        assert!(GroupPartition::custom(4, vec![vec![0, 1], vec![3]]).is_err());
        assert!(GroupPartition::custom(4, vec![vec![0, 1, 2, 3], vec![]]).is_err());
        let p = GroupPartition::custom(4, vec![vec![3, 0], vec![1, 2]]).unwrap();
        assert_eq!(p.group(0).as_slice(), &[0, 3]);
        assert_eq!(p.group_of_row(2), 1);
        assert_eq!(p.uniform_group_size(), Some(2));
    }

    #[test]
    fn identity_hessian_closed_forms() {
        let prob = identity_instance();
        let full = solve_direct(&prob, &PruneSelection::empty()).unwrap();
        assert_abs_diff_eq!(full.objective, -2.5, epsilon = 1e-15);
        assert_eq!(full.weights.to_row_major(), vec![1.0, 2.0]);

        let s0 = solve_direct(&prob, &prob.selection(vec![0]).unwrap()).unwrap();
        assert_abs_diff_eq!(s0.objective, -2.0, epsilon = 1e-15);
        assert_eq!(s0.weights.to_row_major(), vec![2.0]);

        let none = solve_direct(&prob, &PruneSelection::all(2)).unwrap();
        assert_eq!(none.objective, 0.0);
        assert_eq!(none.weights.rows(), 0);
    }

    #[test]
    fn reconstruction_loss_adds_constant() {
        let prob = QuadraticProblem::new(
            SymMatrix::identity(2),
            Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
            GroupPartition::dense(2),
            2.5,
        )
        .unwrap();
        let loss = reconstruction_loss(&prob, &prob.selection(vec![0]).unwrap()).unwrap();
        assert_abs_diff_eq!(loss, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(
            reconstruction_loss(&prob, &PruneSelection::empty()).unwrap(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn direct_solve_matches_gaussian_elimination() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let prob = random_instance(&mut rng, &InstanceShape::uniform(6, 1, 3));
        for s in subsets(6, 2) {
            let sel = prob.selection(s).unwrap();
            let sol = solve_direct(&prob, &sel).unwrap();
            let idx = sol.retained.as_slice();
            let h: Vec<Vec<f64>> =
                idx.iter().map(|&i| idx.iter().map(|&j| prob.h().get(i, j)).collect()).collect();
            let g: Vec<Vec<f64>> = idx.iter().map(|&i| prob.g().row(i)).collect();
            let w = gauss_solve(&h, &g);
            let f: f64 = -0.5
                * g.iter().zip(&w).map(|(gr, wr)| gr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>();
            assert!((sol.objective - f).abs() < 1e-10 * (1.0 + f.abs()));
        }
    }

    #[test]
    fn monotone_in_selection_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let prob = random_instance(&mut rng, &InstanceShape::uniform(6, 2, 3));
            let p = prob.group_count();
            let f: Vec<f64> = (0..1u32 << p)
                .map(|mask| {
                    let s: Vec<usize> = (0..p).filter(|j| mask & (1 << j) != 0).collect();
                    solve_direct(&prob, &prob.selection(s).unwrap()).unwrap().objective
                })
                .collect();
            for a in 0..1usize << p {
                for b in 0..1usize << p {
                    if a & b == a {
                        assert!(f[a] <= f[b] + 1e-10, "f({a:b}) > f({b:b})");
                    }
                }
            }
            assert_eq!(f[(1 << p) - 1], 0.0);
        }
    }

    #[test]
    fn direct_weights_are_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prob = random_instance(&mut rng, &InstanceShape::uniform(5, 3, 4));
        let sel = prob.selection(vec![1, 3]).unwrap();
        let sol = solve_direct(&prob, &sel).unwrap();
        let block = matrix::principal_block(prob.h(), &sol.retained).unwrap();
        let g = prob.g().select_rows(&sol.retained).unwrap();
        let resid = (block.inner() * sol.weights.inner() - g.inner()).amax();
        assert!(resid < 1e-8 * (1.0 + prob.g().max_abs()));
        // The objective also equals L(W) at the scattered full weights.
        let full = sol.full_weights(prob.d1());
        assert_abs_diff_eq!(prob.objective_at(&full).unwrap(), sol.objective, epsilon = 1e-9);
    }

    #[test]
    fn problem_rejects_bad_shapes() {
        let err = QuadraticProblem::new(
            SymMatrix::identity(3),
            Matrix::zeros(2, 1),
            GroupPartition::dense(3),
            0.0,
        );
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
        let not_pd = QuadraticProblem::new(
            SymMatrix::from_diagonal(&[1.0, 0.0]),
            Matrix::zeros(2, 1),
            GroupPartition::dense(2),
            0.0,
        );
        assert!(matches!(not_pd, Err(Error::NotPositiveDefinite)));
    }

    #[test]
    fn group_norms_follow_partition() {
        let w = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 4.0], vec![1.0, 0.0]]).unwrap();
        let part = GroupPartition::custom(3, vec![vec![0, 1], vec![2]]).unwrap();
        assert_eq!(group_norms(&part, &w), vec![5.0, 1.0]);
    }
}
