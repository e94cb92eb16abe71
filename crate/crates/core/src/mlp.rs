//! The 3-20-20-2 perceptron mapping `(x_a, x_l, μ)` to offset magnitude and
//! axial aberration, its Levenberg-Marquardt trainer and the simulated
//! training grid.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamformer::Beamformer;
use crate::error::{Error, Result};
use crate::features::{amplitude_marker, top_intensity_pixels, DEFAULT_N_PIXELS};
use crate::geometry::{ArrayGeometry, ImageGrid, Point3};
use crate::simulator::{
    add_noise, calibrate_noise, clean_frame, frame_rng, CALIBRATION_POINT, DEFAULT_SNR_DB, TRAINING_AXIAL,
    TRAINING_ELEVATION, TRAINING_LATERAL,
};

pub const LAYER_SIZES: [usize; 4] = [3, 20, 20, 2];

/// Total number of weights and biases.
pub const N_PARAMS: usize = 3 * 20 + 20 + 20 * 20 + 20 + 20 * 2 + 2;

pub const MODEL_FORMAT_VERSION: u32 = 1;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-feature affine normalisation `z = (x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and population standard deviations; constant columns
    /// get unit scale.
    pub fn fit<const D: usize>(rows: &[[f64; D]]) -> Self {
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..D).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        let scale = (0..D)
            .map(|c| {
                let v = rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
                let s = v.sqrt();
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn check(&self, dim: usize, name: &str) -> Result<()> {
        if self.mean.len() != dim || self.scale.len() != dim {
            return Err(Error::parse(name, format!("expected {dim} entries")));
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(format!("{name}.mean"), "non-finite value"));
        }
        if self.scale.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::parse(format!("{name}.scale"), "scales must be positive"));
        }
        Ok(())
    }
}

/// One fully connected layer; `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
}

/// Network weights with input and target normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct MLPParams {
    pub layers: Vec<Layer>,
    pub input_norm: Normalization,
    pub target_norm: Normalization,
}

struct Activations {
    z: [f64; 3],
    h1: DVector<f64>,
    h2: DVector<f64>,
    out: DVector<f64>,
}

impl MLPParams {
    /// All-zero network with identity normalisation.
    pub fn zeros() -> Self {
        let layers = LAYER_SIZES
            .windows(2)
            .map(|w| Layer {
                weights: DMatrix::zeros(w[1], w[0]),
                biases: DVector::zeros(w[1]),
            })
            .collect();
        Self {
            layers,
            input_norm: Normalization::identity(3),
            target_norm: Normalization::identity(2),
        }
    }

    /// Weights and biases drawn from `±1/sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = Self::zeros();
        for layer in &mut p.layers {
            let r = 1.0 / (layer.weights.ncols() as f64).sqrt();
            layer.weights.iter_mut().for_each(|w| *w = rng.random_range(-r..r));
            layer.biases.iter_mut().for_each(|b| *b = rng.random_range(-r..r));
        }
        p
    }

    /// Parameters flattened layer by layer, weights row-major then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(N_PARAMS);
        for layer in &self.layers {
            for r in 0..layer.weights.nrows() {
                v.extend(layer.weights.row(r).iter());
            }
            v.extend(layer.biases.iter());
        }
        v
    }

    pub fn set_flat(&mut self, theta: &[f64]) {
        assert_eq!(theta.len(), N_PARAMS, "parameter vector length");
        let mut k = 0;
        for layer in &mut self.layers {
            let (rows, cols) = layer.weights.shape();
            for r in 0..rows {
                for c in 0..cols {
                    layer.weights[(r, c)] = theta[k];
                    k += 1;
                }
            }
            for b in layer.biases.iter_mut() {
                *b = theta[k];
                k += 1;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.biases.iter()).all(|v| v.is_finite()))
    }

    fn normalize_input(&self, u: &[f64; 3]) -> [f64; 3] {
        let n = &self.input_norm;
        std::array::from_fn(|i| (u[i] - n.mean[i]) / n.scale[i])
    }

    fn activations(&self, z: [f64; 3]) -> Activations {
        let [l1, l2, l3] = [&self.layers[0], &self.layers[1], &self.layers[2]];
        let zv = DVector::from_column_slice(&z);
        let h1 = (&l1.weights * zv + &l1.biases).map(sigmoid);
        let h2 = (&l2.weights * &h1 + &l2.biases).map(sigmoid);
        let out = &l3.weights * &h2 + &l3.biases;
        Activations { z, h1, h2, out }
    }

    /// Network output on the normalised target scale.
    fn forward_normalized(&self, z: [f64; 3]) -> [f64; 2] {
        let a = self.activations(z);
        [a.out[0], a.out[1]]
    }

    /// `(offset, aberration)` in mm for input `(x_a, x_l, μ)`.
    pub fn forward(&self, u: &[f64; 3]) -> [f64; 2] {
        let o = self.forward_normalized(self.normalize_input(u));
        let t = &self.target_norm;
        [o[0] * t.scale[0] + t.mean[0], o[1] * t.scale[1] + t.mean[1]]
    }

    /// Derivatives of both normalised outputs with respect to every
    /// parameter, written into `rows[0]` and `rows[1]` in flat order.
    fn jacobian_normalized(&self, z: [f64; 3], rows: [&mut [f64]; 2]) {
        let a = self.activations(z);
        let (w2, w3) = (&self.layers[1].weights, &self.layers[2].weights);
        let d1 = a.h1.map(|h| h * (1.0 - h));
        let d2 = a.h2.map(|h| h * (1.0 - h));
        let (n0, n1, n2, n3) = (3, a.h1.len(), a.h2.len(), 2);
        let off2 = n1 * n0 + n1;
        let off3 = off2 + n2 * n1 + n2;
        for (k, row) in rows.into_iter().enumerate() {
            row.fill(0.0);
            // Output layer: only row k of W3 and b3 affect output k.
            for j in 0..n2 {
                row[off3 + k * n2 + j] = a.h2[j];
            }
            row[off3 + n3 * n2 + k] = 1.0;
            let g2: Vec<f64> = (0..n2).map(|i| w3[(k, i)] * d2[i]).collect();
            for i in 0..n2 {
                for j in 0..n1 {
                    row[off2 + i * n1 + j] = g2[i] * a.h1[j];
                }
                row[off2 + n2 * n1 + i] = g2[i];
            }
            for i in 0..n1 {
                let g1 = d1[i] * (0..n2).map(|r| w2[(r, i)] * g2[r]).sum::<f64>();
                for j in 0..n0 {
                    row[i * n0 + j] = g1 * a.z[j];
                }
                row[n1 * n0 + i] = g1;
            }
        }
    }

    /// `2 × N_PARAMS` Jacobian of the denormalised outputs.
    pub fn jacobian(&self, u: &[f64; 3]) -> DMatrix<f64> {
        let mut r0 = vec![0.0; N_PARAMS];
        let mut r1 = vec![0.0; N_PARAMS];
        self.jacobian_normalized(self.normalize_input(u), [&mut r0, &mut r1]);
        let s = &self.target_norm.scale;
        DMatrix::from_fn(2, N_PARAMS, |k, p| if k == 0 { r0[p] * s[0] } else { r1[p] * s[1] })
    }

    fn check(&self) -> Result<()> {
        for (i, (layer, w)) in self.layers.iter().zip(LAYER_SIZES.windows(2)).enumerate() {
            if layer.weights.shape() != (w[1], w[0]) || layer.biases.len() != w[1] {
                return Err(Error::parse(format!("weights[{i}]"), "layer shape mismatch"));
            }
        }
        if !self.is_finite() {
            return Err(Error::parse("weights", "non-finite parameter"));
        }
        self.input_norm.check(3, "input_norm")?;
        self.target_norm.check(2, "target_norm")
    }
}

/// Simulated training rows: inputs `(x_a, x_l, μ)`, targets `(|x_e|, δ)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub inputs: Vec<[f64; 3]>,
    pub targets: Vec<[f64; 2]>,
    pub positions: Vec<Point3>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Coordinates at which training frames are simulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingGrid {
    pub lateral: (f64, f64),
    pub axial: (f64, f64),
    pub elevation: (f64, f64),
    pub n_lateral: usize,
    pub n_axial: usize,
    pub n_elevation: usize,
    /// Extra in-plane elevations appended to every (lateral, axial) pair.
    pub n_in_plane: usize,
    pub n_pixels: usize,
    /// Noise added before computing the marker, matching tracked sequences;
    /// `None` uses noiseless frames throughout.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for TrainingGrid {
    fn default() -> Self {
        Self {
            lateral: TRAINING_LATERAL,
            axial: TRAINING_AXIAL,
            elevation: TRAINING_ELEVATION,
            n_lateral: 20,
            n_axial: 20,
            n_elevation: 20,
            n_in_plane: 2,
            n_pixels: DEFAULT_N_PIXELS,
            snr_db: Some(DEFAULT_SNR_DB),
            seed: 0,
        }
    }
}

fn linspace(range: (f64, f64), n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5 * (range.0 + range.1)],
        _ => (0..n)
            .map(|k| range.0 + (range.1 - range.0) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

impl TrainingGrid {
    pub fn rows(&self) -> usize {
        self.n_lateral * self.n_axial * (self.n_elevation + self.n_in_plane)
    }

    pub fn points(&self) -> Vec<Point3> {
        let mut elevations = linspace(self.elevation, self.n_elevation);
        elevations.extend(std::iter::repeat_n(0.0, self.n_in_plane));
        let mut pts = Vec::with_capacity(self.rows());
        for &l in &linspace(self.lateral, self.n_lateral) {
            for &a in &linspace(self.axial, self.n_axial) {
                pts.extend(elevations.iter().map(|&e| Point3::new(l, a, e)));
            }
        }
        pts
    }
}

/// Simulate one frame per grid point and extract the marker and the
/// aberration of the brightest pixels. The aberration is always measured on
/// the noiseless image; noise, when configured, only affects the marker.
pub fn generate_training_data(
    geometry: &ArrayGeometry,
    image_grid: &ImageGrid,
    grid: &TrainingGrid,
) -> Result<TrainingSet> {
    if grid.rows() == 0 {
        return Err(Error::domain("training grid is empty"));
    }
    let sigma = match grid.snr_db {
        Some(snr) => calibrate_noise(geometry, &CALIBRATION_POINT, snr)?,
        None => 0.0,
    };
    let points = grid.points();
    // Deep out-of-plane points appear below the nominal image; extend the
    // grid so their aberration is measured rather than clipped.
    let deepest = points
        .iter()
        .map(|p| p.axial.hypot(p.elevational))
        .fold(0.0, f64::max);
    let mut target_grid = *image_grid;
    target_grid.axial_max = target_grid.axial_max.max(deepest + 1.0);
    let bf = Beamformer::new(geometry, &target_grid)?;
    let rows = points
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let clean = clean_frame(geometry, p, k)?;
            let mu = if sigma > 0.0 {
                let mut noisy = clean.clone();
                add_noise(&mut noisy, sigma, &mut frame_rng(grid.seed, k));
                amplitude_marker(&noisy)
            } else {
                amplitude_marker(&clean)
            };
            let obs = top_intensity_pixels(&bf.reconstruct(&clean)?, grid.n_pixels)?;
            Ok(([p.axial, p.lateral, mu], [p.elevational.abs(), obs.mean_axial() - p.axial]))
        })
        .collect::<Result<Vec<_>>>()?;
    let (inputs, targets) = rows.into_iter().unzip();
    Ok(TrainingSet {
        inputs,
        targets,
        positions: points,
    })
}

/// Levenberg-Marquardt settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LMConfig {
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_epochs: usize,
    pub validation_patience: usize,
    pub gradient_tolerance: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self {
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            max_epochs: 1000,
            validation_patience: 6,
            gradient_tolerance: 1e-7,
            train_fraction: 0.85,
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = (0.0..=1.0).contains(&self.train_fraction)
            && (0.0..=1.0).contains(&self.val_fraction)
            && (self.train_fraction + self.val_fraction - 1.0).abs() < 1e-9;
        if !frac_ok {
            return Err(Error::domain("train and validation fractions must sum to 1"));
        }
        if self.validation_patience == 0 {
            return Err(Error::domain("validation patience must be at least 1"));
        }
        if !(self.lambda0 > 0.0 && self.lambda_up > 1.0 && self.lambda_down > 0.0 && self.lambda_down < 1.0) {
            return Err(Error::domain("invalid damping schedule"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    Gradient,
    MaxEpochs,
}

/// Summary of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub rows: usize,
    pub train_rows: usize,
    pub val_rows: usize,
    pub epochs: usize,
    pub stop_reason: StopReason,
    /// Mean squared error on normalised targets at the returned parameters.
    pub train_mse: f64,
    pub val_mse: f64,
    /// Offset RMSE (mm) on validation rows.
    pub val_rmse_offset: f64,
    /// Offset RMSE (mm) on validation rows with `|x_e| >= 1` mm.
    pub val_rmse_offset_far: f64,
    pub val_rmse_aberration: f64,
    pub final_lambda: f64,
    /// Training MSE after every accepted step.
    pub loss_history: Vec<f64>,
    pub seconds: f64,
}

/// Mean of squared residuals over all outputs, on normalised targets.
fn mse(p: &MLPParams, z: &[[f64; 3]], t: &[[f64; 2]]) -> f64 {
    let sum: f64 = z
        .iter()
        .zip(t)
        .map(|(z, t)| {
            let o = p.forward_normalized(*z);
            (t[0] - o[0]).powi(2) + (t[1] - o[1]).powi(2)
        })
        .sum();
    sum / (2 * z.len().max(1)) as f64
}

/// Upper damping bound; beyond it a failed step means no descent
/// direction is resolvable.
const LAMBDA_CAP_FACTOR: f64 = 1e8;

/// Fit the network to `data` by Levenberg-Marquardt, returning the
/// parameters with the best validation error.
pub fn train_lm(data: &TrainingSet, config: &LMConfig) -> Result<(MLPParams, TrainingReport)> {
    config.validate()?;
    let m = data.len();
    if m < 100 {
        return Err(Error::domain(format!("training needs at least 100 rows, got {m}")));
    }
    if data.targets.len() != m {
        return Err(Error::domain("inputs and targets differ in length"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let n_train = ((m as f64 * config.train_fraction).round() as usize).clamp(1, m - 1);
    let (train_idx, val_idx) = order.split_at(n_train);

    let pick3 = |idx: &[usize]| idx.iter().map(|&i| data.inputs[i]).collect::<Vec<_>>();
    let pick2 = |idx: &[usize]| idx.iter().map(|&i| data.targets[i]).collect::<Vec<_>>();
    let (raw_train_in, raw_train_t) = (pick3(train_idx), pick2(train_idx));
    let mut params = MLPParams::random(&mut rng);
    params.input_norm = Normalization::fit(&raw_train_in);
    params.target_norm = Normalization::fit(&raw_train_t);
    let norm_in = |rows: Vec<[f64; 3]>| rows.iter().map(|u| params.normalize_input(u)).collect::<Vec<_>>();
    let tn = params.target_norm.clone();
    let norm_t = |rows: Vec<[f64; 2]>| {
        rows.iter()
            .map(|t| [(t[0] - tn.mean[0]) / tn.scale[0], (t[1] - tn.mean[1]) / tn.scale[1]])
            .collect::<Vec<_>>()
    };
    let (zt, tt) = (norm_in(raw_train_in), norm_t(raw_train_t));
    let (zv, tv) = (norm_in(pick3(val_idx)), norm_t(pick2(val_idx)));

    let mut theta = params.to_flat();
    let mut loss = mse(&params, &zt, &tt);
    let mut best = (mse(&params, &zv, &tv), theta.clone());
    let mut stall = 0;
    let mut lambda = config.lambda0;
    let lambda_cap = config.lambda0 * LAMBDA_CAP_FACTOR;
    let mut history = vec![loss];
    let mut epochs = 0;
    let mut stop = StopReason::MaxEpochs;
    // Jᵀ, one column per (sample, output) pair.
    let mut jt = DMatrix::<f64>::zeros(N_PARAMS, 2 * n_train);
    let mut resid = DVector::<f64>::zeros(2 * n_train);

    while epochs < config.max_epochs {
        epochs += 1;
        jt.as_mut_slice()
            .par_chunks_mut(2 * N_PARAMS)
            .zip(resid.as_mut_slice().par_chunks_mut(2))
            .enumerate()
            .for_each(|(i, (cols, r))| {
                let (c0, c1) = cols.split_at_mut(N_PARAMS);
                params.jacobian_normalized(zt[i], [c0, c1]);
                let o = params.forward_normalized(zt[i]);
                r[0] = tt[i][0] - o[0];
                r[1] = tt[i][1] - o[1];
            });
        let jtr = &jt * &resid;
        let grad_norm = jtr.norm() / n_train as f64;
        if grad_norm / (1.0 + loss) < config.gradient_tolerance {
            stop = StopReason::Gradient;
            break;
        }
        let jtj = &jt * jt.transpose();

        let mut accepted = false;
        loop {
            let mut a = jtj.clone();
            for d in 0..N_PARAMS {
                a[(d, d)] += lambda;
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&jtr),
                None => {
                    lambda *= config.lambda_up;
                    if lambda > lambda_cap {
                        return Err(Error::Training(format!(
                            "normal equations singular at damping {lambda:e} (epoch {epochs})"
                        )));
                    }
                    continue;
                }
            };
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            params.set_flat(&trial);
            let trial_loss = mse(&params, &zt, &tt);
            if trial_loss.is_finite() && trial_loss < loss {
                theta = trial;
                loss = trial_loss;
                lambda = (lambda * config.lambda_down).max(f64::MIN_POSITIVE);
                accepted = true;
                break;
            }
            params.set_flat(&theta);
            lambda *= config.lambda_up;
            if lambda > lambda_cap {
                break;
            }
        }
        if !accepted {
            stop = StopReason::Gradient;
            break;
        }
        history.push(loss);
        let val = mse(&params, &zv, &tv);
        if val < best.0 {
            best = (val, theta.clone());
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.validation_patience {
                stop = StopReason::Patience;
                break;
            }
        }
    }

    params.set_flat(&best.1);
    if !params.is_finite() {
        return Err(Error::Training("non-finite parameters".into()));
    }
    let train_mse = mse(&params, &zt, &tt);
    let rmse = |rows: &mut dyn Iterator<Item = (f64, f64)>| {
        let (s, c) = rows.fold((0.0, 0usize), |(s, c), (y, t)| (s + (y - t).powi(2), c + 1));
        if c == 0 {
            0.0
        } else {
            (s / c as f64).sqrt()
        }
    };
    let val_pred: Vec<([f64; 2], [f64; 2])> = val_idx
        .iter()
        .map(|&i| (params.forward(&data.inputs[i]), data.targets[i]))
        .collect();
    let report = TrainingReport {
        rows: m,
        train_rows: n_train,
        val_rows: val_idx.len(),
        epochs,
        stop_reason: stop,
        train_mse,
        val_mse: best.0,
        val_rmse_offset: rmse(&mut val_pred.iter().map(|(y, t)| (y[0], t[0]))),
        val_rmse_offset_far: rmse(&mut val_pred.iter().filter(|(_, t)| t[0] >= 1.0).map(|(y, t)| (y[0], t[0]))),
        val_rmse_aberration: rmse(&mut val_pred.iter().map(|(y, t)| (y[1], t[1]))),
        final_lambda: lambda,
        loss_history: history,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

/// A network together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: MLPParams,
    pub report: Option<TrainingReport>,
    /// Geometry of the training frames; sequences with a different geometry
    /// are rejected at tracking time.
    pub geometry: Option<ArrayGeometry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    layer_sizes: Vec<usize>,
    /// Per layer, `out` rows of `in` weights.
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    input_norm: Normalization,
    target_norm: Normalization,
    #[serde(default)]
    training_report: Option<TrainingReport>,
    #[serde(default)]
    geometry: Option<ArrayGeometry>,
}

impl TrainedModel {
    pub fn to_json(&self) -> Result<String> {
        let p = &self.params;
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            layer_sizes: LAYER_SIZES.to_vec(),
            weights: p
                .layers
                .iter()
                .map(|l| (0..l.weights.nrows()).map(|r| l.weights.row(r).iter().copied().collect()).collect())
                .collect(),
            biases: p.layers.iter().map(|l| l.biases.iter().copied().collect()).collect(),
            input_norm: p.input_norm.clone(),
            target_norm: p.target_norm.clone(),
            training_report: self.report.clone(),
            geometry: self.geometry.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| {
            Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::parse(
                "format_version",
                format!("unsupported version {}", file.format_version),
            ));
        }
        if file.layer_sizes != LAYER_SIZES {
            return Err(Error::parse(
                "layer_sizes",
                format!("expected {:?}, found {:?}", LAYER_SIZES, file.layer_sizes),
            ));
        }
        if file.weights.len() != 3 || file.biases.len() != 3 {
            return Err(Error::parse("weights", "expected three layers"));
        }
        let mut layers = Vec::with_capacity(3);
        for (i, (w, b)) in file.weights.iter().zip(&file.biases).enumerate() {
            let (rows, cols) = (LAYER_SIZES[i + 1], LAYER_SIZES[i]);
            if w.len() != rows || w.iter().any(|r| r.len() != cols) {
                return Err(Error::parse(format!("weights[{i}]"), format!("expected {rows}x{cols}")));
            }
            if b.len() != rows {
                return Err(Error::parse(format!("biases[{i}]"), format!("expected {rows} entries")));
            }
            layers.push(Layer {
                weights: DMatrix::from_fn(rows, cols, |r, c| w[r][c]),
                biases: DVector::from_column_slice(b),
            });
        }
        let params = MLPParams {
            layers,
            input_norm: file.input_norm,
            target_norm: file.target_norm,
        };
        params.check()?;
        Ok(Self {
            params,
            report: file.training_report,
            geometry: file.geometry,
        })
    }
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_json()?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    TrainedModel::from_json(&fs::read_to_string(path)?).map_err(|e| match e {
        Error::Parse { context, message } => Error::Parse {
            context: format!("{}: {context}", path.display()),
            message,
        },
        other => other,
    })
}
