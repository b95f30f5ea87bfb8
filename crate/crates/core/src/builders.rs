//! Building pruning problems from calibration activations.
//!
//! For inputs `X` (rows are samples, as seen by the layer in the pruned
//! network), dense-network inputs `X̂` and dense weights `Ŵ`, the layer loss is
//!
//! ```text
//! ½‖X·W − X̂·Ŵ‖² + ½ε‖W − Ŵ‖²
//! ```
//!
//! where `ε = λ·mean(diag XᵀX)` is the damping shift. Expanding gives
//! `H = XᵀX + εI`, `G = XᵀX̂Ŵ + εŴ` and `const = ½‖X̂Ŵ‖² + ½ε‖Ŵ‖²`, so
//! `reconstruction_loss` is the loss above and an unpruned layer with `X = X̂`
//! has loss exactly zero. Sums are not divided by the sample count.
//!
//! Convolutions are lowered to the dense case with im2col: each output
//! position of each sample contributes one patch row of length
//! `C_in·k_H·k_W`, ordered channel-major (all taps of channel 0, then
//! channel 1, ...), so pruning input channel `j` zeroes the contiguous rows
//! `j·k_H·k_W .. (j+1)·k_H·k_W`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{damping_shift, Matrix, SymMatrix};
use crate::problem::{GroupPartition, QuadraticProblem};

/// Default relative damping `λ`.
pub const DEFAULT_DAMPING: f64 = 1e-4;

/// One calibration sample of a convolution input, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i / width.max(1), col: i % width.max(1) });
        }
        Ok(FeatureMap { channels, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }
}

/// Calibration inputs of one layer: `X` from the pruned network and `X̂`
/// from the dense network (identical unless errors are propagated).
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBatch {
    x: Matrix,
    x_hat: Matrix,
}

impl CalibrationBatch {
    pub fn new(x: Matrix, x_hat: Matrix) -> Result<Self> {
        if x.rows() != x_hat.rows() || x.cols() != x_hat.cols() {
            return Err(Error::ShapeMismatch(format!(
                "X is {}x{} but X̂ is {}x{}",
                x.rows(),
                x.cols(),
                x_hat.rows(),
                x_hat.cols()
            )));
        }
        Ok(CalibrationBatch { x, x_hat })
    }

    /// `X̂ = X`.
    pub fn single(x: Matrix) -> Self {
        CalibrationBatch { x_hat: x.clone(), x }
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn x_hat(&self) -> &Matrix {
        &self.x_hat
    }

    pub fn samples(&self) -> usize {
        self.x.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    /// Input feature-map height.
    pub height: usize,
    /// Input feature-map width.
    pub width: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.c_in, self.c_out, self.k_h, self.k_w, self.height, self.width, self.stride];
        if dims.contains(&0) {
            return Err(Error::ShapeMismatch(format!("conv spec has a zero dimension: {self:?}")));
        }
        if self.k_h > self.height + 2 * self.padding || self.k_w > self.width + 2 * self.padding {
            return Err(Error::ShapeMismatch(format!("kernel larger than padded input: {self:?}")));
        }
        Ok(())
    }

    pub fn kernel_area(&self) -> usize {
        self.k_h * self.k_w
    }

    /// `C_in·k_H·k_W`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel_area()
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.k_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.k_w) / self.stride + 1
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn check_map(&self, map: &FeatureMap) -> Result<()> {
        if (map.channels, map.height, map.width) != (self.c_in, self.height, self.width) {
            return Err(Error::ShapeMismatch(format!(
                "feature map is {}x{}x{}, layer expects {}x{}x{}",
                map.channels, map.height, map.width, self.c_in, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Convolution weights as `C_out × (C_in·k_H·k_W)`, each row one filter with
/// taps in the patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    filters: Matrix,
}

impl FilterBank {
    pub fn new(filters: Matrix, spec: &ConvSpec) -> Result<Self> {
        if filters.rows() != spec.c_out || filters.cols() != spec.patch_len() {
            return Err(Error::ShapeMismatch(format!(
                "filter bank is {}x{}, expected {}x{}",
                filters.rows(),
                filters.cols(),
                spec.c_out,
                spec.patch_len()
            )));
        }
        Ok(FilterBank { filters })
    }

    /// Pruning-layout weights `(C_in·k_H·k_W) × C_out`.
    pub fn flattened(&self) -> Matrix {
        self.filters.transpose()
    }

    pub fn from_flattened(w: &Matrix) -> FilterBank {
        FilterBank { filters: w.transpose() }
    }

    pub fn filters(&self) -> &Matrix {
        &self.filters
    }
}

/// im2col over all samples: rows ordered by sample, output row, output
/// column.
pub fn im2col(maps: &[FeatureMap], spec: &ConvSpec) -> Result<Matrix> {
    spec.validate()?;
    let (oh, ow, kh, kw) = (spec.out_height(), spec.out_width(), spec.k_h, spec.k_w);
    let per = spec.positions();
    let mut out = DMatrix::zeros(maps.len() * per, spec.patch_len());
    for (n, map) in maps.iter().enumerate() {
        spec.check_map(map)?;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = n * per + oy * ow + ox;
                for c in 0..spec.c_in {
                    for dy in 0..kh {
                        let y = (oy * spec.stride + dy).wrapping_sub(spec.padding);
                        if y >= spec.height {
                            continue;
                        }
                        for dx in 0..kw {
                            let x = (ox * spec.stride + dx).wrapping_sub(spec.padding);
                            if x < spec.width {
                                out[(row, (c * kh + dy) * kw + dx)] = map.get(c, y, x);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Matrix::from_inner(out))
}

/// Reassembles per-position outputs (`(N·positions) × C_out`, as produced by
/// `im2col(..) · W_flat`) into one feature map per sample.
pub fn conv_outputs_to_maps(y: &Matrix, spec: &ConvSpec) -> Result<Vec<FeatureMap>> {
    let per = spec.positions();
    if y.cols() != spec.c_out || y.rows() % per != 0 {
        return Err(Error::ShapeMismatch(format!(
            "conv output is {}x{}, expected a multiple of {per} rows and {} columns",
            y.rows(),
            y.cols(),
            spec.c_out
        )));
    }
    (0..y.rows() / per)
        .map(|n| {
            let mut data = vec![0.0; spec.c_out * per];
            for c in 0..spec.c_out {
                for pos in 0..per {
                    data[c * per + pos] = y.get(n * per + pos, c);
                }
            }
            FeatureMap::new(spec.c_out, spec.out_height(), spec.out_width(), data)
        })
        .collect()
}

/// Flattens each map channel-major into one row.
pub fn flatten_maps(maps: &[FeatureMap]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = maps.iter().map(|m| m.data.clone()).collect();
    if rows.is_empty() {
        return Err(Error::ShapeMismatch("no calibration samples".into()));
    }
    Matrix::from_rows(&rows)
}

fn build(batch: &CalibrationBatch, w_hat: &Matrix, damping: f64, partition: GroupPartition) -> Result<QuadraticProblem> {
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Error::ShapeMismatch(format!("damping must be a nonnegative number, got {damping}")));
    }
    let (x, x_hat, w) = (batch.x().inner(), batch.x_hat().inner(), w_hat.inner());
    if x.ncols() != w.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "inputs have {} features but weights have {} rows",
            x.ncols(),
            w.nrows()
        )));
    }
    let gram = SymMatrix::symmetrized(x.tr_mul(x));
    let eps = damping_shift(&gram, damping);
    let mut h = gram.into_inner();
    for i in 0..h.nrows() {
        h[(i, i)] += eps;
    }
    let target = x_hat * w;
    let mut g = x.tr_mul(&target);
    g += w * eps;
    let const_term = 0.5 * target.norm_squared() + 0.5 * eps * w.norm_squared();
    let samples = batch.samples();
    Ok(QuadraticProblem::new(SymMatrix::symmetrized(h), Matrix::from_inner(g), partition, const_term)?
        .with_samples(samples))
}

/// One group per input feature.
pub fn build_dense(batch: &CalibrationBatch, w_hat: &Matrix, damping: f64) -> Result<QuadraticProblem> {
    build(batch, w_hat, damping, GroupPartition::dense(w_hat.rows()))
}

/// One group per head: `rows / n_heads` consecutive rows.
pub fn build_attention(
    batch: &CalibrationBatch,
    w_hat: &Matrix,
    n_heads: usize,
    damping: f64,
) -> Result<QuadraticProblem> {
    let partition = GroupPartition::attention(w_hat.rows(), n_heads)?;
    build(batch, w_hat, damping, partition)
}

/// One group per input channel, with `X̂ = X`.
pub fn build_conv(samples: &[FeatureMap], filters: &FilterBank, spec: &ConvSpec, damping: f64) -> Result<QuadraticProblem> {
    build_conv_sequential(samples, samples, filters, spec, damping)
}

/// One group per input channel; `samples` are the pruned-network inputs and
/// `dense_samples` the dense-network inputs.
pub fn build_conv_sequential(
    samples: &[FeatureMap],
    dense_samples: &[FeatureMap],
    filters: &FilterBank,
    spec: &ConvSpec,
    damping: f64,
) -> Result<QuadraticProblem> {
    let x = im2col(samples, spec)?;
    let x_hat = im2col(dense_samples, spec)?;
    let batch = CalibrationBatch::new(x, x_hat)?;
    let partition = GroupPartition::conv(spec.c_in, spec.kernel_area())?;
    build(&batch, &filters.flattened(), damping, partition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{reconstruction_loss, solve_direct, PartitionKind, PruneSelection};
    use crate::reference::sliding_window_patches;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Matrix::from_row_major(rows, cols, &data).unwrap()
    }

    fn random_maps(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Vec<FeatureMap> {
        (0..n)
            .map(|_| FeatureMap::new(c, h, w, (0..c * h * w).map(|_| StandardNormal.sample(rng)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn identity_calibration() {
        let w = Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5], vec![0.0, 3.0]]).unwrap();
        let prob = build_dense(&CalibrationBatch::single(Matrix::identity(3)), &w, 1e-4).unwrap();
        for i in 0..3 {
            assert_eq!(prob.h().get(i, i), 1.0 + 1e-4);
        }
        let rel = (prob.g().inner() - w.inner()).norm() / w.inner().norm();
        assert!(rel < 2e-4);
        assert_eq!(prob.partition().kind(), PartitionKind::Dense);
        assert_eq!(prob.samples(), Some(3));
    }

    #[test]
    fn single_sample_factors_after_damping() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let prob = build_dense(&CalibrationBatch::single(x.clone()), &w, 1e-4).unwrap();
        assert!(crate::matrix::cholesky(prob.h()).is_ok());
        assert!(build_dense(&CalibrationBatch::single(x), &w, 0.0).is_err());
    }

    #[test]
    fn unpruned_loss_is_zero_and_loss_matches_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = normal(&mut rng, 40, 6);
        let w = normal(&mut rng, 6, 3);
        let prob = build_dense(&CalibrationBatch::single(x.clone()), &w, 1e-4).unwrap();
        assert!(reconstruction_loss(&prob, &PruneSelection::empty()).unwrap().abs() < 1e-8);

        let x_hat = normal(&mut rng, 40, 6);
        let undamped = build_dense(&CalibrationBatch::new(x.clone(), x_hat.clone()).unwrap(), &w, 0.0).unwrap();
        let sel = PruneSelection::new(vec![1, 4], 6).unwrap();
        let sol = solve_direct(&undamped, &sel).unwrap();
        let wf = sol.full_weights(6);
        let resid = x.inner() * wf.inner() - x_hat.inner() * w.inner();
        let loss = 0.5 * resid.norm_squared();
        let got = sol.objective + undamped.const_term();
        assert!((got - loss).abs() < 1e-8 * loss.max(1.0));
    }

    #[test]
    fn attention_partition_and_merged_dense_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normal(&mut rng, 30, 8);
        let w = normal(&mut rng, 8, 2);
        let batch = CalibrationBatch::single(x);
        let att = build_attention(&batch, &w, 2, 1e-4).unwrap();
        assert_eq!(att.partition().group(0).as_slice(), &[0, 1, 2, 3]);
        assert_eq!(att.partition().group(1).as_slice(), &[4, 5, 6, 7]);
        let dense = build_dense(&batch, &w, 1e-4).unwrap();
        let f_head = solve_direct(&att, &PruneSelection::new(vec![1], 2).unwrap()).unwrap().objective;
        let f_rows = solve_direct(&dense, &PruneSelection::new(vec![4, 5, 6, 7], 8).unwrap()).unwrap().objective;
        assert!((f_head - f_rows).abs() < 1e-10 * f_rows.abs());

        let per_row = build_attention(&batch, &w, 8, 1e-4).unwrap();
        assert_eq!(per_row.partition().groups(), dense.partition().groups());
        assert!(matches!(build_attention(&batch, &w, 3, 1e-4), Err(Error::NotDivisible { rows: 8, heads: 3 })));
    }

    #[test]
    fn dense_shape_mismatch() {
        let batch = CalibrationBatch::single(Matrix::identity(3));
        assert!(matches!(build_dense(&batch, &Matrix::zeros(4, 1), 1e-4), Err(Error::ShapeMismatch(_))));
        assert!(CalibrationBatch::new(Matrix::zeros(2, 3), Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn conv_3x3_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec { c_in: 1, c_out: 1, k_h: 3, k_w: 3, height: 4, width: 4, padding: 0, stride: 1 };
        let maps = random_maps(&mut rng, 1, 1, 4, 4);
        let patches = im2col(&maps, &spec).unwrap();
        assert_eq!((patches.rows(), patches.cols()), (4, 9));
        let reference = sliding_window_patches(maps[0].data(), 1, 4, 4, 3, 3, 1, 0);
        for (r, row) in reference.iter().enumerate() {
            assert_eq!(&patches.row(r), row);
        }
        let filters = FilterBank::new(normal(&mut rng, 1, 9), &spec).unwrap();
        let prob = build_conv(&maps, &filters, &spec, 1e-4).unwrap();
        assert_eq!(prob.d1(), 9);
    }

    #[test]
    fn conv_multichannel_padding_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec { c_in: 3, c_out: 2, k_h: 3, k_w: 2, height: 5, width: 6, padding: 1, stride: 2 };
        let maps = random_maps(&mut rng, 2, 3, 5, 6);
        let patches = im2col(&maps, &spec).unwrap();
        let mut r = 0;
        for m in &maps {
            for row in sliding_window_patches(m.data(), 3, 5, 6, 3, 2, 2, 1) {
                assert_eq!(patches.row(r), row);
                r += 1;
            }
        }
        assert_eq!(r, patches.rows());
        let filters = FilterBank::new(normal(&mut rng, 2, 18), &spec).unwrap();
        let prob = build_conv(&maps, &filters, &spec, 1e-4).unwrap();
        assert_eq!(prob.group_count(), 3);
        assert_eq!(prob.partition().group(1).as_slice(), &[6, 7, 8, 9, 10, 11]);
        let sol = solve_direct(&prob, &PruneSelection::new(vec![1], 3).unwrap()).unwrap();
        let full = sol.full_weights(18);
        assert!((6..12).all(|row| full.row(row).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn conv_output_reassembly() {
        let spec = ConvSpec { c_in: 1, c_out: 2, k_h: 1, k_w: 1, height: 1, width: 2, padding: 0, stride: 1 };
        let y = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let maps = conv_outputs_to_maps(&y, &spec).unwrap();
        assert_eq!(maps[0].data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn pointwise_conv_is_dense_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec { c_in: 4, c_out: 3, k_h: 1, k_w: 1, height: 3, width: 2, padding: 0, stride: 1 };
        let maps = random_maps(&mut rng, 3, 4, 3, 2);
        let filters = FilterBank::new(normal(&mut rng, 3, 4), &spec).unwrap();
        let conv = build_conv(&maps, &filters, &spec, 1e-4).unwrap();
        let rows: Vec<Vec<f64>> = maps
            .iter()
            .flat_map(|m| (0..6).map(move |pos| (0..4).map(|c| m.data()[c * 6 + pos]).collect()))
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let dense = build_dense(&CalibrationBatch::single(x), &filters.flattened(), 1e-4).unwrap();
        assert_eq!(conv.h(), dense.h());
        assert_eq!(conv.g(), dense.g());
        assert_eq!(conv.const_term(), dense.const_term());
        assert_eq!(conv.partition().groups(), dense.partition().groups());
    }

    #[test]
    fn conv_spec_and_map_validation() {
        let spec = ConvSpec { c_in: 2, c_out: 1, k_h: 3, k_w: 3, height: 2, width: 2, padding: 0, stride: 1 };
        assert!(spec.validate().is_err());
        let spec = ConvSpec { height: 3, width: 3, ..spec };
        let wrong = FeatureMap::new(1, 3, 3, vec![0.0; 9]).unwrap();
        assert!(im2col(&[wrong], &spec).is_err());
        assert!(FeatureMap::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(FilterBank::new(Matrix::zeros(1, 17), &spec).is_err());
    }
}
