//! Dense real matrices and the symmetric positive-definite operations the
//! pruning objective needs.
//!
//! Storage is backed by `nalgebra`. `Matrix` is a general rectangular matrix,
//! `SymMatrix` is a square matrix that is kept exactly symmetric (every
//! constructor averages it with its transpose), and `IndexSet` is a sorted,
//! duplicate-free list of row indices used to address principal blocks.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Dense row-major-addressed matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix(DMatrix<f64>);

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Matrix(DMatrix::identity(n, n))
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: pos / cols.max(1), col: pos % cols.max(1) });
        }
        Ok(Matrix(DMatrix::from_row_slice(rows, cols, data)))
    }

    /// Builds a matrix from a list of equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch(format!(
                "row {bad} has {} entries, expected {cols}",
                rows[bad].len()
            )));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Matrix::from_row_major(rows.len(), cols, &flat)
    }

    pub fn from_inner(inner: DMatrix<f64>) -> Self {
        Matrix(inner)
    }

    pub fn inner(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn inner_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.0[(row, col)] = value;
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows() * self.cols());
        for r in 0..self.rows() {
            out.extend(self.0.row(r).iter().copied());
        }
        out
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        self.0.row(r).iter().copied().collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix(self.0.transpose())
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols() != rhs.rows() {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows(),
                self.cols(),
                rhs.rows(),
                rhs.cols()
            )));
        }
        Ok(Matrix(&self.0 * &rhs.0))
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn tr_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows() != rhs.rows() {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows(),
                self.cols(),
                rhs.rows(),
                rhs.cols()
            )));
        }
        Ok(Matrix(self.0.tr_mul(&rhs.0)))
    }

    /// Gathers the listed rows, in order.
    pub fn select_rows(&self, rows: &IndexSet) -> Result<Matrix> {
        rows.check_bound(self.rows())?;
        Ok(Matrix(self.0.select_rows(rows.as_slice())))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }
}

/// Square matrix kept exactly symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Symmetrizes `m` as `(m + mᵀ)/2`. Fails if `m` is not square.
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::ShapeMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(SymMatrix::symmetrized(m.0))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag)))
    }

    /// Wraps a square nalgebra matrix, averaging it with its transpose.
    pub fn symmetrized(mut m: DMatrix<f64>) -> Self {
        symmetrize_in_place(&mut m);
        SymMatrix(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }

    pub fn inner(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix(self.0.clone())
    }

    pub fn mean_diagonal(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        self.0.diagonal().sum() / self.dim() as f64
    }
}

pub(crate) fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Strictly increasing list of row indices below some bound.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    /// Validates that `indices` is strictly increasing and below `bound`.
    pub fn new(indices: Vec<usize>, bound: usize) -> Result<Self> {
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::ShapeMismatch(format!(
                "index set not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        let set = IndexSet(indices);
        set.check_bound(bound)?;
        Ok(set)
    }

    /// Sorts and deduplicates arbitrary indices.
    pub fn from_unsorted(mut indices: Vec<usize>, bound: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        IndexSet::new(indices, bound)
    }

    pub(crate) fn from_sorted_unchecked(indices: Vec<usize>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        IndexSet(indices)
    }

    pub fn all(n: usize) -> Self {
        IndexSet((0..n).collect())
    }

    pub fn empty() -> Self {
        IndexSet(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    fn check_bound(&self, bound: usize) -> Result<()> {
        match self.0.last() {
            Some(&last) if last >= bound => Err(Error::IndexOutOfRange { index: last, bound }),
            _ => Ok(()),
        }
    }
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = A`.
#[derive(Clone, Debug)]
pub struct LowerTriangularFactor(Cholesky<f64, Dyn>);

impl LowerTriangularFactor {
    pub fn l(&self) -> Matrix {
        Matrix(self.0.l())
    }

    /// Solves `A·X = B`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        Matrix(self.0.solve(&b.0))
    }

    pub fn inverse(&self) -> SymMatrix {
        SymMatrix::symmetrized(self.0.inverse())
    }
}

pub fn cholesky(a: &SymMatrix) -> Result<LowerTriangularFactor> {
    cholesky_inner(&a.0).map(LowerTriangularFactor)
}

pub(crate) fn cholesky_inner(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    // nalgebra accepts zero pivots that later produce Inf/NaN; reject them here.
    let chol = Cholesky::new(a.clone()).ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l_dirty();
    if (0..l.nrows()).any(|i| !(l[(i, i)] > 0.0) || !l[(i, i)].is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(chol)
}

/// Inverse of a positive-definite matrix, symmetrized.
pub fn inverse_spd(a: &SymMatrix) -> Result<SymMatrix> {
    Ok(cholesky(a)?.inverse())
}

/// `A[rows, cols]` as a dense matrix.
pub fn extract_block(a: &SymMatrix, rows: &IndexSet, cols: &IndexSet) -> Result<Matrix> {
    rows.check_bound(a.dim())?;
    cols.check_bound(a.dim())?;
    Ok(Matrix(gather(&a.0, rows.as_slice(), cols.as_slice())))
}

/// Principal block `A[idx, idx]`, which is symmetric whenever `A` is.
pub fn principal_block(a: &SymMatrix, idx: &IndexSet) -> Result<SymMatrix> {
    idx.check_bound(a.dim())?;
    Ok(SymMatrix(gather(&a.0, idx.as_slice(), idx.as_slice())))
}

/// `c ← β·c + α·op(a)·op(b)`, where `op` transposes when the flag is set.
///
/// Always goes through `matrixmultiply`; nalgebra's own `gemm` switches to a
/// much slower loop when any dimension is 5 or less, which is the common case
/// for the thin factors in rank-`t` updates.
pub(crate) fn dgemm(alpha: f64, a: &DMatrix<f64>, ta: bool, b: &DMatrix<f64>, tb: bool, beta: f64, c: &mut DMatrix<f64>) {
    let (m, k) = if ta { (a.ncols(), a.nrows()) } else { (a.nrows(), a.ncols()) };
    let (kb, n) = if tb { (b.ncols(), b.nrows()) } else { (b.nrows(), b.ncols()) };
    assert!(k == kb && c.nrows() == m && c.ncols() == n, "dgemm shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    // Column-major storage: element (i, j) sits at i + j·nrows.
    let strides = |x: &DMatrix<f64>, t: bool| {
        let ld = x.nrows() as isize;
        if t {
            (ld, 1)
        } else {
            (1, ld)
        }
    };
    let (rsa, csa) = strides(a, ta);
    let (rsb, csb) = strides(b, tb);
    // SAFETY: the shapes and strides above describe exactly the storage of
    // `a`, `b` and `c`, and `c` does not alias either input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
}

/// Copy of `a` without the rows `drop` (sorted, in bounds), and without the
/// same columns when `square`.
pub(crate) fn without_rows(a: &DMatrix<f64>, drop: &[usize], square: bool) -> DMatrix<f64> {
    let rows = a.nrows() - drop.len();
    let mut out = Vec::with_capacity(rows * if square { rows } else { a.ncols() });
    let mut skip = drop.iter().peekable();
    for (j, col) in a.as_slice().chunks_exact(a.nrows().max(1)).enumerate().take(a.ncols()) {
        if square && skip.peek() == Some(&&j) {
            skip.next();
            continue;
        }
        let mut start = 0;
        for &r in drop {
            out.extend_from_slice(&col[start..r]);
            start = r + 1;
        }
        out.extend_from_slice(&col[start..]);
    }
    let cols = if square { rows } else { a.ncols() };
    DMatrix::from_vec(rows, cols, out)
}

pub(crate) fn gather(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| a[(rows[r], cols[c])])
}

/// `A + λ·mean(diag A)·I`, or `A + λ·I` when the mean diagonal is zero.
pub fn damp(a: &SymMatrix, lambda_rel: f64) -> SymMatrix {
    let shift = damping_shift(a, lambda_rel);
    let mut m = a.0.clone();
    for i in 0..a.dim() {
        m[(i, i)] += shift;
    }
    SymMatrix(m)
}

/// The absolute diagonal shift `damp` adds.
pub fn damping_shift(a: &SymMatrix, lambda_rel: f64) -> f64 {
    let mean = a.mean_diagonal();
    if mean == 0.0 {
        lambda_rel
    } else {
        lambda_rel * mean
    }
}
