//! Linear-Gaussian filter over the extended eight-dimensional state
//! `(x_l, x_a, v_l, v_a, x_e, δ, v_e, v_δ)`.
//!
//! The first four entries are in-plane position and velocity, the last four
//! the out-of-plane offset magnitude, the axial aberration and their rates.
//! Observations stack `n` lateral pixel coordinates, `n` axial pixel
//! coordinates and the network's offset and aberration outputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{floored_variances, PixelObservations};

pub const STATE_DIM: usize = 8;

/// Initial covariance scale; `P₀ = 15·I` mm².
pub const INITIAL_VARIANCE: f64 = 15.0;

pub mod idx {
    pub const LATERAL: usize = 0;
    pub const AXIAL: usize = 1;
    pub const V_LATERAL: usize = 2;
    pub const V_AXIAL: usize = 3;
    pub const ELEVATION: usize = 4;
    pub const ABERRATION: usize = 5;
    pub const V_ELEVATION: usize = 6;
    pub const V_ABERRATION: usize = 7;
}

/// Dynamic model used between frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Constant velocity driven by random acceleration.
    #[serde(rename = "nnk")]
    Nnk,
    /// Positions follow a Gaussian random walk.
    #[serde(rename = "nnk-rw")]
    NnkRw,
    /// Independent states; every frame starts from the initial prior.
    #[serde(rename = "nnk-i")]
    NnkI,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Nnk => "nnk",
            Variant::NnkRw => "nnk-rw",
            Variant::NnkI => "nnk-i",
        }
    }
}

/// Process noise variances (mm²) of lateral, axial, offset and aberration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessNoise {
    pub lateral: f64,
    pub axial: f64,
    pub elevation: f64,
    pub aberration: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self::uniform(0.005 * 0.005)
    }
}

impl ProcessNoise {
    pub fn uniform(variance: f64) -> Self {
        Self {
            lateral: variance,
            axial: variance,
            elevation: variance,
            aberration: variance,
        }
    }

    fn diagonal(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![
            self.lateral,
            self.axial,
            self.elevation,
            self.aberration,
        ]))
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.lateral, self.axial, self.elevation, self.aberration];
        if v.iter().all(|x| x.is_finite() && *x > 0.0) {
            Ok(())
        } else {
            Err(Error::domain("process noise variances must be positive"))
        }
    }
}

/// State-space matrices for one observation size.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrices {
    pub transition: DMatrix<f64>,
    pub noise_gain: DMatrix<f64>,
    pub observation: DMatrix<f64>,
    pub process_cov: DMatrix<f64>,
    pub dt: f64,
    pub n_pixels: usize,
}

/// Constant-velocity blocks for a (position pair, velocity pair) quartet.
pub fn cv_blocks(dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        1.0, 0.0, dt,  0.0,
        0.0, 1.0, 0.0, dt,
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    ]);
    let h = 0.5 * dt * dt;
    #[rustfmt::skip]
    let g = DMatrix::from_row_slice(4, 2, &[
        h,   0.0,
        0.0, h,
        dt,  0.0,
        0.0, dt,
    ]);
    (a, g)
}

fn block_diag(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = a.shape();
    let mut out = DMatrix::zeros(2 * r, 2 * c);
    out.view_mut((0, 0), (r, c)).copy_from(a);
    out.view_mut((r, c), (r, c)).copy_from(a);
    out
}

/// Observation matrix: `n` rows reading lateral position, `n` reading axial
/// position, then offset and aberration.
pub fn observation_matrix(n: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(2 * n + 2, STATE_DIM);
    for k in 0..n {
        h[(k, idx::LATERAL)] = 1.0;
        h[(n + k, idx::AXIAL)] = 1.0;
    }
    h[(2 * n, idx::ELEVATION)] = 1.0;
    h[(2 * n + 1, idx::ABERRATION)] = 1.0;
    h
}

pub fn build_matrices(n: usize, dt: f64, noise: &ProcessNoise, variant: Variant) -> Result<ModelMatrices> {
    if n < 2 {
        return Err(Error::domain("at least two pixels per frame are required"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::domain("dt must be positive"));
    }
    noise.validate()?;
    let (transition, noise_gain, process_cov) = match variant {
        Variant::Nnk => {
            let (a, g) = cv_blocks(dt);
            let gs = block_diag(&g);
            let q = &gs * noise.diagonal() * gs.transpose();
            (block_diag(&a), gs, q)
        }
        Variant::NnkRw => {
            // Positions carry over, velocities are unused; noise enters
            // positions directly.
            let positions = [idx::LATERAL, idx::AXIAL, idx::ELEVATION, idx::ABERRATION];
            let mut a = DMatrix::zeros(STATE_DIM, STATE_DIM);
            let mut g = DMatrix::zeros(STATE_DIM, 4);
            for (c, &p) in positions.iter().enumerate() {
                a[(p, p)] = 1.0;
                g[(p, c)] = 1.0;
            }
            let q = &g * noise.diagonal() * g.transpose();
            (a, g, q)
        }
        Variant::NnkI => {
            // x_k = c_k with c_k drawn from the uninformative initial prior.
            (
                DMatrix::zeros(STATE_DIM, STATE_DIM),
                DMatrix::identity(STATE_DIM, STATE_DIM),
                DMatrix::identity(STATE_DIM, STATE_DIM) * INITIAL_VARIANCE,
            )
        }
    };
    Ok(ModelMatrices {
        transition,
        noise_gain,
        observation: observation_matrix(n),
        process_cov,
        dt,
        n_pixels: n,
    })
}

/// Gaussian belief over the extended state.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Default for FilterState {
    fn default() -> Self {
        Self::initial()
    }
}

impl FilterState {
    /// Zero mean, `15·I` covariance.
    pub fn initial() -> Self {
        Self {
            mean: DVector::zeros(STATE_DIM),
            cov: DMatrix::identity(STATE_DIM, STATE_DIM) * INITIAL_VARIANCE,
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        self.mean[i]
    }
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let t = p.transpose();
    *p += t;
    *p *= 0.5;
}

/// Stacked pixel coordinates and network outputs with their diagonal noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedMeasurement {
    pub y: DVector<f64>,
    /// Diagonal of `R*`.
    pub noise_diag: DVector<f64>,
}

impl ExtendedMeasurement {
    /// Pixel variances (floored) on the pixel rows; the larger of the two
    /// on the network rows.
    pub fn new(obs: &PixelObservations, offset: f64, aberration: f64) -> Self {
        let n = obs.len();
        let (l, a) = floored_variances(obs);
        let y = DVector::from_iterator(
            2 * n + 2,
            obs.y_lateral
                .iter()
                .chain(&obs.y_axial)
                .copied()
                .chain([offset, aberration]),
        );
        let noise_diag = DVector::from_iterator(
            2 * n + 2,
            std::iter::repeat_n(l, n)
                .chain(std::iter::repeat_n(a, n))
                .chain([l.max(a); 2]),
        );
        Self { y, noise_diag }
    }

    pub fn noise_cov(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.noise_diag)
    }
}

/// Prior prediction `m = A·m`, `P = A·P·Aᵀ + Q`.
pub fn predict(state: &FilterState, mm: &ModelMatrices) -> FilterState {
    let a = &mm.transition;
    let mut cov = a * &state.cov * a.transpose() + &mm.process_cov;
    symmetrize(&mut cov);
    FilterState {
        mean: a * &state.mean,
        cov,
    }
}

/// Measurement update. The innovation covariance is factorised, never
/// inverted.
pub fn update(pred: &FilterState, meas: &ExtendedMeasurement, mm: &ModelMatrices) -> Result<FilterState> {
    let h = &mm.observation;
    if meas.y.len() != h.nrows() || meas.noise_diag.len() != h.nrows() {
        return Err(Error::domain(format!(
            "measurement has {} rows, model expects {}",
            meas.y.len(),
            h.nrows()
        )));
    }
    if meas.y.iter().chain(meas.noise_diag.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            frame: None,
            message: "non-finite measurement".into(),
        });
    }
    let residual = &meas.y - h * &pred.mean;
    let hp = h * &pred.cov;
    let mut s = &hp * h.transpose();
    for (k, r) in meas.noise_diag.iter().enumerate() {
        s[(k, k)] += r;
    }
    let chol = s.clone().cholesky().ok_or_else(|| Error::Numerical {
        frame: None,
        message: "innovation covariance is not positive definite".into(),
    })?;
    // S·Kᵀ = H·P
    let gain = chol.solve(&hp).transpose();
    let mean = &pred.mean + &gain * residual;
    let mut cov = &pred.cov - &gain * s * gain.transpose();
    symmetrize(&mut cov);
    Ok(FilterState { mean, cov })
}

/// Axial position with the estimated aberration removed.
pub fn correct_axial(state: &FilterState) -> f64 {
    state.mean[idx::AXIAL] - state.mean[idx::ABERRATION]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn measurement(rng: &mut impl Rng, n: usize) -> ExtendedMeasurement {
        let obs = PixelObservations::new(
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..n).map(|_| rng.random_range(5.0..6.0)).collect(),
        )
        .unwrap();
        ExtendedMeasurement::new(&obs, rng.random_range(0.0..3.0), rng.random_range(0.0..0.5))
    }

    #[test]
    fn nnk_transition_block() {
        let mm = build_matrices(15, 1.0, &ProcessNoise::default(), Variant::Nnk).unwrap();
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.0, 1.0, 0.0,
            0.0, 1.0, 0.0, 1.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        ]);
        assert_eq!(mm.transition.view((0, 0), (4, 4)), expected);
        assert_eq!(mm.transition.view((4, 4), (4, 4)), expected);
        assert_eq!(mm.transition.view((0, 4), (4, 4)), DMatrix::<f64>::zeros(4, 4));
        assert_eq!(mm.observation.shape(), (32, 8));
    }

    #[test]
    fn nnk_i_has_zero_transition() {
        let mm = build_matrices(4, 1.0, &ProcessNoise::default(), Variant::NnkI).unwrap();
        assert_eq!(mm.transition, DMatrix::<f64>::zeros(8, 8));
    }

    #[test]
    fn process_covariance_matches_direct_product() {
        let s = 0.3;
        let mm = build_matrices(3, 1.0, &ProcessNoise::uniform(s), Variant::Nnk).unwrap();
        // Element-by-element G·(sI)·Gᵀ with G written out by hand.
        let g = [
            [0.5, 0.0, 0.0, 0.0],
            [0.0, 0.5, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.5, 0.0],
            [0.0, 0.0, 0.0, 0.5],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        for r in 0..8 {
            for c in 0..8 {
                let mut v = 0.0;
                for k in 0..4 {
                    v += g[r][k] * s * g[c][k];
                }
                assert_relative_eq!(mm.process_cov[(r, c)], v, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn invalid_model_arguments() {
        let q = ProcessNoise::default();
        assert!(build_matrices(1, 1.0, &q, Variant::Nnk).is_err());
        assert!(build_matrices(3, 0.0, &q, Variant::Nnk).is_err());
        assert!(build_matrices(3, 1.0, &ProcessNoise::uniform(0.0), Variant::Nnk).is_err());
    }

    #[test]
    fn predict_examples() {
        let mut mm = build_matrices(2, 1.0, &ProcessNoise::default(), Variant::Nnk).unwrap();
        let mut state = FilterState::initial();
        state.mean[idx::LATERAL] = 1.0;
        state.mean[idx::V_LATERAL] = 2.0;
        assert_eq!(predict(&state, &mm).mean[idx::LATERAL], 3.0);

        mm.transition = DMatrix::identity(8, 8);
        mm.process_cov = DMatrix::zeros(8, 8);
        let s = FilterState {
            mean: DVector::zeros(8),
            cov: DMatrix::identity(8, 8),
        };
        assert_eq!(predict(&s, &mm), s);
    }

    #[test]
    fn predict_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mm = build_matrices(5, 1.0, &ProcessNoise::uniform(0.01), Variant::Nnk).unwrap();
        for _ in 0..50 {
            let p = random_spd(&mut rng, 8);
            let s = FilterState {
                mean: DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0)),
                cov: p.clone(),
            };
            let out = predict(&s, &mm);
            // Triple loop product, independent of nalgebra's gemm.
            for r in 0..8 {
                for c in 0..8 {
                    let mut v = mm.process_cov[(r, c)];
                    for i in 0..8 {
                        for j in 0..8 {
                            v += mm.transition[(r, i)] * p[(i, j)] * mm.transition[(c, j)];
                        }
                    }
                    assert!((out.cov[(r, c)] - v).abs() <= 1e-12 * v.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn consistent_measurement_leaves_mean_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mm = build_matrices(3, 1.0, &ProcessNoise::default(), Variant::Nnk).unwrap();
        let pred = FilterState {
            mean: DVector::from_fn(8, |_, _| rng.random_range(-2.0..2.0)),
            cov: random_spd(&mut rng, 8),
        };
        let mut meas = measurement(&mut rng, 3);
        meas.y = &mm.observation * &pred.mean;
        let post = update(&pred, &meas, &mm).unwrap();
        for k in 0..8 {
            assert_relative_eq!(post.mean[k], pred.mean[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn uninformative_measurement_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mm = build_matrices(4, 1.0, &ProcessNoise::default(), Variant::Nnk).unwrap();
        let pred = FilterState {
            mean: DVector::from_fn(8, |_, _| rng.random_range(1.0..2.0)),
            cov: random_spd(&mut rng, 8),
        };
        let mut meas = measurement(&mut rng, 4);
        meas.noise_diag *= 1e12;
        let post = update(&pred, &meas, &mm).unwrap();
        for k in 0..8 {
            assert_relative_eq!(post.mean[k], pred.mean[k], max_relative = 1e-6);
        }
    }

    #[test]
    fn update_rejects_wrong_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mm = build_matrices(4, 1.0, &ProcessNoise::default(), Variant::Nnk).unwrap();
        let meas = measurement(&mut rng, 3);
        assert!(update(&FilterState::initial(), &meas, &mm).is_err());
    }

    #[test]
    fn non_positive_innovation_is_numerical_error() {
        let mm = build_matrices(2, 1.0, &ProcessNoise::default(), Variant::Nnk).unwrap();
        let meas = ExtendedMeasurement {
            y: DVector::zeros(6),
            noise_diag: DVector::from_element(6, -100.0),
        };
        let err = update(&FilterState::initial(), &meas, &mm).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn extended_measurement_layout() {
        let obs = PixelObservations::new(vec![0.0, 0.2], vec![5.0, 5.0]).unwrap();
        let m = ExtendedMeasurement::new(&obs, 2.0, 0.3);
        assert_eq!(m.y.as_slice(), &[0.0, 0.2, 5.0, 5.0, 2.0, 0.3]);
        let l = obs.s2_lateral;
        assert_eq!(m.noise_diag.as_slice(), &[l, l, 1e-4, 1e-4, l, l]);
    }

    #[test]
    fn axial_correction_examples() {
        let mut s = FilterState::initial();
        s.mean[idx::AXIAL] = 8.5;
        s.mean[idx::ABERRATION] = 1.0;
        assert_eq!(correct_axial(&s), 7.5);
        s.mean[idx::ABERRATION] = 0.0;
        assert_eq!(correct_axial(&s), 8.5);
        s.mean[idx::AXIAL] = 5.0;
        s.mean[idx::ABERRATION] = -0.2;
        assert_eq!(correct_axial(&s), 5.2);
    }

    #[test]
    fn random_walk_without_noise_is_static() {
        let mut mm = build_matrices(2, 1.0, &ProcessNoise::default(), Variant::NnkRw).unwrap();
        mm.process_cov.fill(0.0);
        let mut s = FilterState::initial();
        s.mean = DVector::from_vec(vec![1.0, 2.0, 0.0, 0.0, 3.0, 0.4, 0.0, 0.0]);
        let m0 = s.mean.clone();
        for _ in 0..20 {
            s = predict(&s, &mm);
        }
        assert_eq!(s.mean, m0);
    }

    #[test]
    fn covariance_stays_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mm = build_matrices(3, 1.0, &ProcessNoise::default(), Variant::Nnk).unwrap();
        let mut s = FilterState::initial();
        for k in 0..10_000 {
            s = predict(&s, &mm);
            s = update(&s, &measurement(&mut rng, 3), &mm).unwrap();
            if k % 500 == 0 {
                let min = s.cov.clone().symmetric_eigenvalues().min();
                assert!(min > 0.0, "cycle {k}: min eigenvalue {min}");
            }
        }
        assert!(s.cov.clone().cholesky().is_some());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn update_contracts_covariance(seed in any::<u64>(), n in 2usize..8) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mm = build_matrices(n, 1.0, &ProcessNoise::default(), Variant::Nnk).unwrap();
                let pred = FilterState {
                    mean: DVector::from_fn(8, |_, _| rng.random_range(-2.0..2.0)),
                    cov: random_spd(&mut rng, 8),
                };
                let post = update(&pred, &measurement(&mut rng, n), &mm).unwrap();
                prop_assert!(post.cov.trace() <= pred.cov.trace() + 1e-12);
            }
        }
    }
}
