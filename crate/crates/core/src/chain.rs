//! Layer-by-layer pruning of a sequential network.
//!
//! Two activation streams run through the chain: the dense stream through
//! the original weights and the pruned stream through the weights already
//! pruned. Each layer is fitted so that its output on the pruned stream
//! matches the dense layer's output on the dense stream, which keeps errors
//! from earlier layers from compounding.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::builders::{
    build_attention, build_conv_sequential, build_dense, conv_outputs_to_maps, flatten_maps, im2col, CalibrationBatch,
    ConvSpec, FeatureMap, FilterBank,
};
use crate::error::{Error, Result};
use crate::io::{read_feature_map_dir, read_matrix};
use crate::matrix::Matrix;
use crate::problem::QuadraticProblem;
use crate::search::{run_local_search, PruneReport, SchedulePreset, SearchOptions};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Attention,
    Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerWeights {
    /// `d_in × d_out`.
    Dense(Matrix),
    Attention { weights: Matrix, n_heads: usize },
    Conv { filters: FilterBank, spec: ConvSpec },
}

impl LayerWeights {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerWeights::Dense(_) => LayerKind::Dense,
            LayerWeights::Attention { .. } => LayerKind::Attention,
            LayerWeights::Conv { .. } => LayerKind::Conv,
        }
    }

    /// Weights in pruning layout (rows are input features).
    pub fn flattened(&self) -> Matrix {
        match self {
            LayerWeights::Dense(w) | LayerWeights::Attention { weights: w, .. } => w.clone(),
            LayerWeights::Conv { filters, .. } => filters.flattened(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainLayer {
    pub weights: LayerWeights,
    /// Fraction of groups to prune.
    pub tau: f64,
    /// Applied to this layer's output.
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerChain {
    layers: Vec<ChainLayer>,
}

/// Activations flowing between layers.
#[derive(Clone, Debug, PartialEq)]
pub enum Activations {
    /// One sample per row.
    Rows(Matrix),
    /// One feature map per sample.
    Maps(Vec<FeatureMap>),
}

impl Activations {
    fn rows(&self) -> Result<Matrix> {
        match self {
            Activations::Rows(m) => Ok(m.clone()),
            Activations::Maps(maps) => flatten_maps(maps),
        }
    }

    fn maps(&self) -> Result<&[FeatureMap]> {
        match self {
            Activations::Maps(maps) => Ok(maps),
            Activations::Rows(_) => Err(Error::ShapeMismatch("a conv layer cannot follow a dense layer".into())),
        }
    }

    fn activate(self, act: Activation) -> Activations {
        match self {
            Activations::Rows(m) => Activations::Rows(Matrix::from_inner(m.into_inner().map(|v| act.apply(v)))),
            Activations::Maps(maps) => Activations::Maps(maps.iter().map(|m| m.map_values(|v| act.apply(v))).collect()),
        }
    }

    /// `½` squared distance between two streams.
    pub fn half_squared_distance(&self, other: &Activations) -> Result<f64> {
        let (a, b) = (self.rows()?, other.rows()?);
        if a.rows() != b.rows() || a.cols() != b.cols() {
            return Err(Error::ShapeMismatch("activation streams differ in shape".into()));
        }
        Ok(0.5 * (a.inner() - b.inner()).norm_squared())
    }
}

/// Groups to prune for a fraction `tau` of `p`: `⌊τ·p⌋`, with a `1e-9` slack
/// so that products like `0.29·100` are not rounded down by representation
/// error.
pub fn prune_count_for(tau: f64, p: usize) -> usize {
    ((tau * p as f64 + 1e-9).floor() as usize).min(p)
}

impl LayerChain {
    pub fn new(layers: Vec<ChainLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("chain has no layers".into()));
        }
        let mut seen_dense = false;
        for (i, layer) in layers.iter().enumerate() {
            if !(0.0..=1.0).contains(&layer.tau) {
                return Err(Error::ShapeMismatch(format!("layer {i}: tau {} outside [0, 1]", layer.tau)));
            }
            match &layer.weights {
                LayerWeights::Conv { .. } if seen_dense => {
                    return Err(Error::ShapeMismatch(format!("layer {i}: conv after a dense layer is unsupported")));
                }
                LayerWeights::Conv { spec, .. } => spec.validate()?,
                LayerWeights::Attention { weights, n_heads } => {
                    if *n_heads == 0 || weights.rows() % n_heads != 0 {
                        return Err(Error::NotDivisible { rows: weights.rows(), heads: *n_heads });
                    }
                    seen_dense = true;
                }
                LayerWeights::Dense(_) => seen_dense = true,
            }
        }
        Ok(LayerChain { layers })
    }

    pub fn layers(&self) -> &[ChainLayer] {
        &self.layers
    }

    /// Forward pass with the given per-layer weights in pruning layout.
    pub fn forward(&self, input: &Activations, weights: &[Matrix]) -> Result<Activations> {
        let mut x = input.clone();
        for (layer, w) in self.layers.iter().zip(weights) {
            x = apply_layer(&layer.weights, &x, w)?.activate(layer.activation);
        }
        Ok(x)
    }

    pub fn dense_weights(&self) -> Vec<Matrix> {
        self.layers.iter().map(|l| l.weights.flattened()).collect()
    }
}

fn apply_layer(layer: &LayerWeights, x: &Activations, w: &Matrix) -> Result<Activations> {
    match layer {
        LayerWeights::Conv { spec, .. } => {
            let patches = im2col(x.maps()?, spec)?;
            Ok(Activations::Maps(conv_outputs_to_maps(&patches.matmul(w)?, spec)?))
        }
        _ => Ok(Activations::Rows(x.rows()?.matmul(w)?)),
    }
}

fn build_layer(layer: &LayerWeights, x: &Activations, x_hat: &Activations, damping: f64) -> Result<QuadraticProblem> {
    match layer {
        LayerWeights::Dense(w) => build_dense(&CalibrationBatch::new(x.rows()?, x_hat.rows()?)?, w, damping),
        LayerWeights::Attention { weights, n_heads } => {
            build_attention(&CalibrationBatch::new(x.rows()?, x_hat.rows()?)?, weights, *n_heads, damping)
        }
        LayerWeights::Conv { filters, spec } => build_conv_sequential(x.maps()?, x_hat.maps()?, filters, spec, damping),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainLayerReport {
    pub layer: usize,
    pub kind: LayerKind,
    pub tau: f64,
    pub report: PruneReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub layers: Vec<ChainLayerReport>,
    /// `½‖Y − Ŷ‖²` between the pruned and dense network outputs.
    pub output_loss: f64,
    /// Pruned weights per layer in pruning layout.
    #[serde(skip)]
    pub weights: Vec<Matrix>,
}

impl ChainReport {
    pub fn strip_timing(&mut self) {
        for l in &mut self.layers {
            l.report.strip_timing();
        }
    }
}

/// Prunes every layer in order, propagating both activation streams.
pub fn prune_chain(
    chain: &LayerChain,
    input: &Activations,
    preset: &SchedulePreset,
    damping: f64,
    options: &SearchOptions,
) -> Result<ChainReport> {
    let mut x = input.clone();
    let mut x_hat = input.clone();
    let mut layers = Vec::new();
    let mut weights = Vec::new();
    for (i, layer) in chain.layers.iter().enumerate() {
        let problem = build_layer(&layer.weights, &x, &x_hat, damping)?;
        let p_prime = prune_count_for(layer.tau, problem.group_count());
        let schedule = preset.resolve(p_prime, problem.partition().kind())?;
        let report = run_local_search(&problem, &schedule, preset.method(), options)?;
        let w = report.weights.clone().expect("search reports carry weights");
        x = apply_layer(&layer.weights, &x, &w)?.activate(layer.activation);
        x_hat = apply_layer(&layer.weights, &x_hat, &layer.weights.flattened())?.activate(layer.activation);
        layers.push(ChainLayerReport { layer: i, kind: layer.weights.kind(), tau: layer.tau, report });
        weights.push(w);
    }
    Ok(ChainReport { layers, output_loss: x.half_squared_distance(&x_hat)?, weights })
}

/// On-disk chain description. Paths are relative to the description file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainFile {
    /// Matrix file (rows are samples) or a directory of feature maps.
    pub calibration: PathBuf,
    pub layers: Vec<ChainFileLayer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainFileLayer {
    pub kind: LayerKind,
    /// Dense and attention: `d_in × d_out` matrix. Conv: `C_out × C_in·k_H·k_W`.
    pub weights: PathBuf,
    #[serde(default)]
    pub tau: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvSpec>,
}

/// Reads a chain description and its calibration input.
pub fn load_chain(path: impl AsRef<Path>) -> Result<(LayerChain, Activations)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ChainFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let layers = file
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let w = read_matrix(resolve(&l.weights))?;
            let weights = match l.kind {
                LayerKind::Dense => LayerWeights::Dense(w),
                LayerKind::Attention => LayerWeights::Attention {
                    weights: w,
                    n_heads: l.n_heads.ok_or_else(|| Error::format(path, format!("layer {i}: n_heads missing")))?,
                },
                LayerKind::Conv => {
                    let spec = l.conv.ok_or_else(|| Error::format(path, format!("layer {i}: conv spec missing")))?;
                    LayerWeights::Conv { filters: FilterBank::new(w, &spec)?, spec }
                }
            };
            Ok(ChainLayer { weights, tau: l.tau, activation: l.activation })
        })
        .collect::<Result<Vec<_>>>()?;
    let chain = LayerChain::new(layers)?;
    let calibration = resolve(&file.calibration);
    let input = if calibration.is_dir() {
        Activations::Maps(read_feature_map_dir(&calibration)?)
    } else {
        Activations::Rows(read_matrix(&calibration)?)
    };
    Ok((chain, input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builders::DEFAULT_DAMPING;
    use crate::io::{write_feature_map, write_matrix_csv};
    use crate::search::prune_problem;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Matrix::from_row_major(rows, cols, &data).unwrap()
    }

    fn naive_matmul(a: &[Vec<f64>], b: &Matrix) -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| (0..b.cols()).map(|c| row.iter().enumerate().map(|(k, v)| v * b.get(k, c)).sum()).collect())
            .collect()
    }

    #[test]
    fn prune_counts_round_down() {
        assert_eq!(prune_count_for(0.5, 5), 2);
        assert_eq!(prune_count_for(0.29, 100), 29);
        assert_eq!(prune_count_for(0.0, 7), 0);
        assert_eq!(prune_count_for(1.0, 7), 7);
    }

    #[test]
    fn single_layer_matches_standalone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = normal(&mut rng, 50, 8);
        let w = normal(&mut rng, 8, 3);
        let chain = LayerChain::new(vec![ChainLayer {
            weights: LayerWeights::Dense(w.clone()),
            tau: 0.5,
            activation: Activation::Identity,
        }])
        .unwrap();
        let preset = SchedulePreset::nested(2);
        let got = prune_chain(&chain, &Activations::Rows(x.clone()), &preset, DEFAULT_DAMPING, &SearchOptions::default())
            .unwrap();
        let prob = build_dense(&CalibrationBatch::single(x), &w, DEFAULT_DAMPING).unwrap();
        let want = prune_problem(&prob, &preset, 4, &SearchOptions::default()).unwrap();
        assert_eq!(got.layers[0].report.selection, want.selection);
        assert_eq!(got.layers[0].report.objective, want.objective);
    }

    #[test]
    fn zero_tau_is_a_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normal(&mut rng, 40, 6);
        let layers = vec![
            ChainLayer { weights: LayerWeights::Dense(normal(&mut rng, 6, 5)), tau: 0.0, activation: Activation::Relu },
            ChainLayer { weights: LayerWeights::Dense(normal(&mut rng, 5, 4)), tau: 0.0, activation: Activation::Identity },
        ];
        let chain = LayerChain::new(layers).unwrap();
        let r = prune_chain(&chain, &Activations::Rows(x), &SchedulePreset::nested(2), DEFAULT_DAMPING, &SearchOptions::default())
            .unwrap();
        for (l, dense) in r.layers.iter().zip(chain.dense_weights()) {
            assert!(l.report.reconstruction_loss.abs() < 1e-8);
            assert!(l.report.selection.is_empty());
            let w = &r.weights[l.layer];
            assert!((w.inner() - dense.inner()).amax() < 1e-8);
        }
        assert!(r.output_loss < 1e-12);
    }

    #[test]
    fn two_layer_linear_chain_against_forward_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = normal(&mut rng, 60, 8);
        let w1 = normal(&mut rng, 8, 6);
        let w2 = normal(&mut rng, 6, 3);
        let chain = LayerChain::new(vec![
            ChainLayer { weights: LayerWeights::Dense(w1.clone()), tau: 0.5, activation: Activation::Identity },
            ChainLayer { weights: LayerWeights::Dense(w2.clone()), tau: 0.5, activation: Activation::Identity },
        ])
        .unwrap();
        let r = prune_chain(&chain, &Activations::Rows(x.clone()), &SchedulePreset::greedy(), DEFAULT_DAMPING, &SearchOptions::default())
            .unwrap();
        assert_eq!(r.layers[0].report.selection.len(), 4);
        assert_eq!(r.layers[1].report.selection.len(), 3);
        let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i)).collect();
        let pruned = naive_matmul(&naive_matmul(&rows, &r.weights[0]), &r.weights[1]);
        let dense = naive_matmul(&naive_matmul(&rows, &w1), &w2);
        let loss: f64 = pruned
            .iter()
            .zip(&dense)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(u, v)| 0.5 * (u - v) * (u - v)))
            .sum();
        assert!((loss - r.output_loss).abs() < 1e-8 * loss.max(1.0));
    }

    #[test]
    fn conv_then_dense_from_files() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dir = tempfile::tempdir().unwrap();
        let calib = dir.path().join("calib");
        std::fs::create_dir(&calib).unwrap();
        for n in 0..6 {
            let data: Vec<f64> = (0..2 * 4 * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
            write_feature_map(calib.join(format!("{n:02}.bin")), &FeatureMap::new(2, 4, 4, data).unwrap()).unwrap();
        }
        let spec = ConvSpec { c_in: 2, c_out: 3, k_h: 3, k_w: 3, height: 4, width: 4, padding: 1, stride: 1 };
        write_matrix_csv(dir.path().join("conv.csv"), &normal(&mut rng, 3, 18)).unwrap();
        write_matrix_csv(dir.path().join("fc.csv"), &normal(&mut rng, 48, 2)).unwrap();
        let desc = serde_json::json!({
            "calibration": "calib",
            "layers": [
                {"kind": "conv", "weights": "conv.csv", "tau": 0.5, "activation": "relu", "conv": spec},
                {"kind": "dense", "weights": "fc.csv", "tau": 0.25}
            ]
        });
        let path = dir.path().join("chain.json");
        std::fs::write(&path, desc.to_string()).unwrap();
        let (chain, input) = load_chain(&path).unwrap();
        let r = prune_chain(&chain, &input, &SchedulePreset::nested(2), DEFAULT_DAMPING, &SearchOptions::default()).unwrap();
        assert_eq!(r.layers[0].report.selection.len(), 1);
        assert_eq!(r.layers[1].report.selection.len(), 12);
        assert_eq!(r.layers[0].report.speedup_ratio, Some(2.0));
        let out = chain.forward(&input, &r.weights).unwrap();
        let dense = chain.forward(&input, &chain.dense_weights()).unwrap();
        assert!((out.half_squared_distance(&dense).unwrap() - r.output_loss).abs() < 1e-9 * r.output_loss.max(1.0));
    }

    #[test]
    fn rejects_bad_chains() {
        let spec = ConvSpec { c_in: 1, c_out: 1, k_h: 1, k_w: 1, height: 2, width: 2, padding: 0, stride: 1 };
        let conv = ChainLayer {
            weights: LayerWeights::Conv { filters: FilterBank::new(Matrix::identity(1), &spec).unwrap(), spec },
            tau: 0.0,
            activation: Activation::Identity,
        };
        let dense = ChainLayer { weights: LayerWeights::Dense(Matrix::identity(4)), tau: 0.0, activation: Activation::Identity };
        assert!(LayerChain::new(vec![dense.clone(), conv.clone()]).is_err());
        assert!(LayerChain::new(vec![conv, dense.clone()]).is_ok());
        assert!(LayerChain::new(vec![ChainLayer { tau: 1.5, ..dense }]).is_err());
        assert!(LayerChain::new(vec![]).is_err());
        let bad_act = serde_json::from_str::<ChainFileLayer>(r#"{"kind":"dense","weights":"w","activation":"tanh"}"#);
        assert!(bad_act.is_err());
    }
}
