//! Per-frame tracking loop: reconstruct, extract features, evaluate the
//! network at the previous estimate, filter, and remove the aberration.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::beamformer::Beamformer;
use crate::error::{Error, Result};
use crate::features::{amplitude_marker, brightest, top_intensity_pixels, DEFAULT_N_PIXELS};
use crate::geometry::{ArrayGeometry, ImageGrid, RFFrame, USImage};
use crate::kalman::{
    build_matrices, correct_axial, idx, predict, update, ExtendedMeasurement, FilterState, ModelMatrices,
    ProcessNoise, Variant, STATE_DIM,
};
use crate::mlp::MLPParams;

/// Wall-clock time spent in each stage of one step, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub reconstruct: f64,
    pub features: f64,
    pub nn: f64,
    pub kalman: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.reconstruct + self.features + self.nn + self.kalman
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Filter output for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEstimate {
    pub frame_index: usize,
    pub lateral: f64,
    /// Axial position with the aberration removed.
    pub axial_corrected: f64,
    /// Axial position as seen in the image.
    pub axial_apparent: f64,
    /// Offset magnitude, clamped at zero.
    pub elevation_magnitude: f64,
    /// Unclamped offset state.
    pub elevation_raw: f64,
    pub aberration: f64,
    pub variance_diag: [f64; STATE_DIM],
    /// The update failed and the estimate is the prediction alone.
    pub coasted: bool,
    #[serde(skip)]
    pub timing: StageTimes,
}

impl TrackEstimate {
    fn from_state(state: &FilterState, frame_index: usize, coasted: bool, timing: StageTimes) -> Self {
        let e = state.mean[idx::ELEVATION];
        Self {
            frame_index,
            lateral: state.mean[idx::LATERAL],
            axial_corrected: correct_axial(state),
            axial_apparent: state.mean[idx::AXIAL],
            elevation_magnitude: e.max(0.0),
            elevation_raw: e,
            aberration: state.mean[idx::ABERRATION],
            variance_diag: std::array::from_fn(|i| state.cov[(i, i)]),
            coasted,
            timing,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub n_pixels: usize,
    pub dt: f64,
    pub noise: ProcessNoise,
    pub variant: Variant,
    pub model: MLPParams,
    pub grid: ImageGrid,
}

impl TrackerConfig {
    pub fn new(model: MLPParams) -> Self {
        Self {
            n_pixels: DEFAULT_N_PIXELS,
            dt: 1.0,
            noise: ProcessNoise::default(),
            variant: Variant::Nnk,
            model,
            grid: ImageGrid::default(),
        }
    }
}

/// One tracking run. Owns its filter state; the beamformer may be shared.
#[derive(Debug, Clone)]
pub struct Session {
    config: TrackerConfig,
    matrices: ModelMatrices,
    beamformer: Arc<Beamformer>,
    state: FilterState,
    last: Option<TrackEstimate>,
    frames_seen: usize,
}

impl Session {
    pub fn new(config: TrackerConfig, geometry: &ArrayGeometry) -> Result<Self> {
        let bf = Arc::new(Beamformer::new(geometry, &config.grid)?);
        Self::with_beamformer(config, bf)
    }

    /// Session reusing a prebuilt delay table, which must match the
    /// configured grid.
    pub fn with_beamformer(config: TrackerConfig, beamformer: Arc<Beamformer>) -> Result<Self> {
        if config.n_pixels < 2 {
            return Err(Error::domain("n_pixels must be at least 2"));
        }
        if *beamformer.grid() != config.grid {
            return Err(Error::domain("beamformer grid differs from tracker grid"));
        }
        if !config.model.is_finite() {
            return Err(Error::domain("model has non-finite parameters"));
        }
        let matrices = build_matrices(config.n_pixels, config.dt, &config.noise, config.variant)?;
        Ok(Self {
            config,
            matrices,
            beamformer,
            state: FilterState::initial(),
            last: None,
            frames_seen: 0,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Most recent estimate; `None` before the first frame.
    pub fn estimate(&self) -> Option<&TrackEstimate> {
        self.last.as_ref()
    }

    /// Process one frame.
    pub fn step(&mut self, frame: &RFFrame) -> Result<TrackEstimate> {
        let mut timing = StageTimes::default();

        let t = Instant::now();
        let prior = predict(&self.state, &self.matrices);
        timing.kalman += ms_since(t);

        let t = Instant::now();
        let image = self.beamformer.reconstruct(frame)?;
        timing.reconstruct = ms_since(t);

        let t = Instant::now();
        let mu = amplitude_marker(frame);
        let obs = top_intensity_pixels(&image, self.config.n_pixels)?;
        timing.features = ms_since(t);

        let t = Instant::now();
        let (lateral, axial) = match &self.last {
            Some(_) => (self.state.mean[idx::LATERAL], correct_axial(&self.state)),
            None => (obs.mean_lateral(), obs.mean_axial()),
        };
        let [offset, aberration] = self.config.model.forward(&[axial, lateral, mu]);
        timing.nn = ms_since(t);

        let t = Instant::now();
        let meas = ExtendedMeasurement::new(&obs, offset, aberration);
        let (state, coasted) = match update(&prior, &meas, &self.matrices) {
            Ok(s) if s.mean.iter().all(|v| v.is_finite()) => (s, false),
            Ok(_) => (prior, true),
            Err(e) if e.is_numerical() => (prior, true),
            Err(e) => return Err(e),
        };
        timing.kalman += ms_since(t);

        self.state = state;
        let est = TrackEstimate::from_state(&self.state, frame.frame_index, coasted, timing);
        self.last = Some(est.clone());
        self.frames_seen += 1;
        Ok(est)
    }
}

/// Coordinates of the brightest pixel.
pub fn mi_estimate(image: &USImage) -> Result<(f64, f64)> {
    if image.intensity().is_empty() {
        return Err(Error::domain("empty image"));
    }
    let p = brightest(image, 1)[0];
    let n_axial = image.grid.n_axial();
    image.grid.pixel_to_mm(p / n_axial, p % n_axial)
}
