//! Pulse-echo forward model for a single point scatterer.
//!
//! Each source emits a Gaussian-modulated sinusoid that travels to the
//! scatterer and back to the detector. Amplitudes follow 1/r spreading on
//! both legs and a baffled-piston directivity in the elevational direction;
//! the detector is an omnidirectional point receiver. The medium is
//! homogeneous and lossless.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, Point3, RFFrame};

/// Amplitude scale so that a target 10 mm from both source and detector
/// returns unit amplitude.
const AMPLITUDE_SCALE: f64 = 100.0;

/// Envelope half-width, in standard deviations, beyond which the pulse is
/// treated as zero.
const PULSE_SUPPORT: f64 = 6.0;

/// Noise calibration reference: in-plane target at mid depth.
pub const CALIBRATION_POINT: Point3 = Point3::new(0.0, 7.5, 0.0);

/// Bounds of the region the network is trained on (mm).
pub const TRAINING_LATERAL: (f64, f64) = (-12.0, 12.0);
pub const TRAINING_AXIAL: (f64, f64) = (0.5, 14.5);
pub const TRAINING_ELEVATION: (f64, f64) = (-10.0, 10.0);

/// Far-field baffled circular piston pattern `|2·J1(x)/x|`, `x = k·a·sin θ`.
pub fn directivity(theta: f64, geometry: &ArrayGeometry) -> f64 {
    jinc(geometry.wavenumber() * geometry.element_radius * theta.sin())
}

fn jinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0
    } else {
        (2.0 * libm::j1(x) / x).abs()
    }
}

/// Standard deviation (µs) of the Gaussian pulse envelope whose -6 dB
/// amplitude bandwidth is `fractional_bandwidth · f0`.
pub fn pulse_sigma(geometry: &ArrayGeometry) -> f64 {
    let bandwidth = geometry.pulse_fractional_bandwidth * geometry.pulse_center_frequency;
    (2.0 * std::f64::consts::LN_2).sqrt() / (PI * bandwidth)
}

/// Transmitted waveform at time `t` µs relative to its centre.
pub fn pulse(t: f64, sigma: f64, f0: f64) -> f64 {
    (-0.5 * (t / sigma).powi(2)).exp() * (2.0 * PI * f0 * t).cos()
}

/// Arrival time and amplitude of the echo received via source `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Echo {
    /// Two-way time of flight, µs.
    pub delay: f64,
    pub amplitude: f64,
}

/// Per-source echoes for a target.
pub fn echoes(geometry: &ArrayGeometry, target: &Point3) -> Vec<Echo> {
    let detector = geometry.detector_position;
    let r_det = target.distance(&detector);
    (0..geometry.num_sources)
        .map(|s| {
            let r_src = target.distance(&geometry.source(s));
            let theta = (target.elevational / r_src).clamp(-1.0, 1.0).asin();
            Echo {
                delay: (r_src + r_det) / geometry.speed_of_sound,
                amplitude: AMPLITUDE_SCALE * directivity(theta, geometry) / (r_src * r_det),
            }
        })
        .collect()
}

fn check_target(target: &Point3) -> Result<()> {
    if !target.is_finite() {
        return Err(Error::domain("target coordinates must be finite"));
    }
    if target.axial <= 0.0 {
        return Err(Error::domain("target must lie in front of the array"));
    }
    Ok(())
}

/// Noise-free frame for a point target. Echoes that run past the record are
/// truncated.
pub fn clean_frame(geometry: &ArrayGeometry, target: &Point3, frame_index: usize) -> Result<RFFrame> {
    check_target(target)?;
    let sigma = pulse_sigma(geometry);
    let f0 = geometry.pulse_center_frequency;
    let fs = geometry.sampling_rate;
    let len = geometry.record_length;
    let mut frame = RFFrame::zeros(geometry, frame_index);
    let data = frame.data_mut();
    for (s, echo) in echoes(geometry, target).into_iter().enumerate() {
        let first = ((echo.delay - PULSE_SUPPORT * sigma) * fs).floor().max(0.0) as usize;
        let last = ((echo.delay + PULSE_SUPPORT * sigma) * fs).ceil();
        if last < 0.0 || first >= len {
            continue;
        }
        let last = (last as usize).min(len - 1);
        let trace = &mut data[s * len..(s + 1) * len];
        for (n, v) in trace.iter_mut().enumerate().take(last + 1).skip(first) {
            let t = n as f64 / fs - echo.delay;
            *v = (echo.amplitude * pulse(t, sigma, f0)) as f32;
        }
    }
    Ok(frame)
}

/// Frame with i.i.d. Gaussian noise of standard deviation `noise_sigma`.
pub fn simulate_frame<R: Rng + ?Sized>(
    geometry: &ArrayGeometry,
    target: &Point3,
    noise_sigma: f64,
    frame_index: usize,
    rng: &mut R,
) -> Result<RFFrame> {
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::domain("noise_sigma must be finite and non-negative"));
    }
    let mut frame = clean_frame(geometry, target, frame_index)?;
    if noise_sigma > 0.0 {
        add_noise(&mut frame, noise_sigma, rng);
    }
    Ok(frame)
}

pub(crate) fn add_noise<R: Rng + ?Sized>(frame: &mut RFFrame, sigma: f64, rng: &mut R) {
    for v in frame.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = (*v as f64 + sigma * n) as f32;
    }
}

/// Random stream for frame `frame_index` of a sequence seeded with `seed`.
pub fn frame_rng(seed: u64, frame_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_index as u64);
    rng
}

/// Peak absolute sample of the noise-free frame at `point`.
pub fn clean_peak(geometry: &ArrayGeometry, point: &Point3) -> Result<f64> {
    let frame = clean_frame(geometry, point, 0)?;
    Ok(frame.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64)))
}

/// Noise standard deviation giving `snr_db` against the clean peak sample of
/// an in-plane reference target.
pub fn calibrate_noise(geometry: &ArrayGeometry, reference: &Point3, snr_db: f64) -> Result<f64> {
    if reference.elevational != 0.0 {
        return Err(Error::domain("noise reference must be in-plane"));
    }
    if !snr_db.is_finite() {
        return Err(Error::domain("snr_db must be finite"));
    }
    let peak = clean_peak(geometry, reference)?;
    if peak == 0.0 {
        return Err(Error::domain("reference frame is all zero"));
    }
    Ok(peak / 10f64.powf(snr_db / 20.0))
}

/// Parameters of the curved lateral-axial path shared by experiments 1-3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    pub lateral_center: f64,
    /// Amplitude of the sinusoidal lateral sweep, mm.
    pub lateral_amplitude: f64,
    /// Number of sweep periods over the sequence.
    pub sweep_cycles: f64,
    pub axial_start: f64,
    pub axial_end: f64,
    pub elevation_start: f64,
    pub elevation_end: f64,
}

impl Default for CurveParams {
    fn default() -> Self {
        Self {
            lateral_center: 0.0,
            lateral_amplitude: 3.0,
            sweep_cycles: 0.5,
            axial_start: 5.0,
            axial_end: 10.0,
            elevation_start: 1.0,
            elevation_end: 4.0,
        }
    }
}

/// Shape of a synthetic trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Curved in-plane path with elevation changing at constant velocity.
    Exp1Curved(CurveParams),
    /// Same path as `Exp1Curved`; noise bursts are configured in [`NoiseSpec`].
    Exp2CurvedNoisy(CurveParams),
    /// Same lateral-axial path with the target kept in-plane.
    #[serde(rename = "exp3_inplane")]
    Exp3InPlane(CurveParams),
    /// Fixed lateral/axial position, elevation ramps linearly.
    Exp4Stationary {
        lateral: f64,
        axial: f64,
        elevation_start: f64,
        elevation_end: f64,
    },
    /// Fixed lateral/elevational position, axial sweep.
    AxialLine {
        lateral: f64,
        elevational: f64,
        axial_start: f64,
        axial_end: f64,
    },
    /// Piecewise-linear path through the given points.
    CustomWaypoints { waypoints: Vec<Point3> },
}

impl TrajectoryKind {
    pub fn exp1() -> Self {
        Self::Exp1Curved(CurveParams::default())
    }

    pub fn exp2() -> Self {
        Self::Exp2CurvedNoisy(CurveParams::default())
    }

    pub fn exp3() -> Self {
        Self::Exp3InPlane(CurveParams::default())
    }

    pub fn exp4(axial: f64) -> Self {
        Self::Exp4Stationary {
            lateral: 0.0,
            axial,
            elevation_start: 0.0,
            elevation_end: 5.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Exp1Curved(_) => "exp1_curved",
            Self::Exp2CurvedNoisy(_) => "exp2_curved_noisy",
            Self::Exp3InPlane(_) => "exp3_inplane",
            Self::Exp4Stationary { .. } => "exp4_stationary",
            Self::AxialLine { .. } => "axial_line",
            Self::CustomWaypoints { .. } => "custom_waypoints",
        }
    }

    /// Default-parameter trajectory for a kind name.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "exp1_curved" => Self::exp1(),
            "exp2_curved_noisy" => Self::exp2(),
            "exp3_inplane" => Self::exp3(),
            "exp4_stationary" => Self::exp4(7.5),
            "axial_line" => Self::AxialLine {
                lateral: 0.0,
                elevational: 0.0,
                axial_start: 2.0,
                axial_end: 14.0,
            },
            other => return Err(Error::domain(format!("unknown trajectory kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub n_frames: usize,
    #[serde(flatten)]
    pub kind: TrajectoryKind,
}

impl TrajectorySpec {
    pub fn new(kind: TrajectoryKind, n_frames: usize) -> Self {
        Self { n_frames, kind }
    }
}

fn in_training_bounds(p: &Point3) -> bool {
    let within = |v: f64, (lo, hi): (f64, f64)| v >= lo - 1e-9 && v <= hi + 1e-9;
    p.is_finite()
        && within(p.lateral, TRAINING_LATERAL)
        && within(p.axial, TRAINING_AXIAL)
        && within(p.elevational, TRAINING_ELEVATION)
}

/// Ground-truth positions for every frame.
pub fn gen_trajectory(spec: &TrajectorySpec) -> Result<Vec<Point3>> {
    let n = spec.n_frames;
    if n == 0 {
        return Err(Error::domain("trajectory needs at least one frame"));
    }
    // Normalised time in [0, 1].
    let t = |k: usize| if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
    let lerp = |a: f64, b: f64, s: f64| a + (b - a) * s;
    let curve = |c: &CurveParams, k: usize, in_plane: bool| {
        let s = t(k);
        Point3::new(
            c.lateral_center + c.lateral_amplitude * (2.0 * PI * c.sweep_cycles * s).sin(),
            lerp(c.axial_start, c.axial_end, s),
            if in_plane {
                0.0
            } else {
                lerp(c.elevation_start, c.elevation_end, s)
            },
        )
    };
    let points: Vec<Point3> = match &spec.kind {
        TrajectoryKind::Exp1Curved(c) | TrajectoryKind::Exp2CurvedNoisy(c) => {
            (0..n).map(|k| curve(c, k, false)).collect()
        }
        TrajectoryKind::Exp3InPlane(c) => (0..n).map(|k| curve(c, k, true)).collect(),
        TrajectoryKind::Exp4Stationary {
            lateral,
            axial,
            elevation_start,
            elevation_end,
        } => (0..n)
            .map(|k| Point3::new(*lateral, *axial, lerp(*elevation_start, *elevation_end, t(k))))
            .collect(),
        TrajectoryKind::AxialLine {
            lateral,
            elevational,
            axial_start,
            axial_end,
        } => (0..n)
            .map(|k| Point3::new(*lateral, lerp(*axial_start, *axial_end, t(k)), *elevational))
            .collect(),
        TrajectoryKind::CustomWaypoints { waypoints } => interpolate_waypoints(waypoints, n)?,
    };
    if let Some(p) = points.iter().find(|p| !in_training_bounds(p)) {
        return Err(Error::domain(format!(
            "trajectory point ({}, {}, {}) lies outside the training grid",
            p.lateral, p.axial, p.elevational
        )));
    }
    Ok(points)
}

fn interpolate_waypoints(waypoints: &[Point3], n: usize) -> Result<Vec<Point3>> {
    match waypoints.len() {
        0 => Err(Error::domain("custom trajectory needs at least one waypoint")),
        1 => Ok(vec![waypoints[0]; n]),
        m => Ok((0..n)
            .map(|k| {
                let s = if n == 1 {
                    0.0
                } else {
                    k as f64 * (m - 1) as f64 / (n - 1) as f64
                };
                let seg = (s.floor() as usize).min(m - 2);
                let f = s - seg as f64;
                let (a, b) = (waypoints[seg], waypoints[seg + 1]);
                Point3::new(
                    a.lateral + f * (b.lateral - a.lateral),
                    a.axial + f * (b.axial - a.axial),
                    a.elevational + f * (b.elevational - a.elevational),
                )
            })
            .collect()),
    }
}

/// Default SNR (dB) of an in-plane target at the calibration point, against
/// the clean peak sample. Normal frames stay trackable while tenfold bursts
/// can still push noise pixels above the target.
pub const DEFAULT_SNR_DB: f64 = 20.0;

/// Measurement noise of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub target_snr_db: f64,
    /// Noise multiplier on burst frames.
    pub burst_factor: f64,
    /// Every frame whose 1-based index is a multiple of this is a burst
    /// frame; 0 disables bursts.
    pub burst_every: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            target_snr_db: DEFAULT_SNR_DB,
            burst_factor: 10.0,
            burst_every: 10,
            seed,
        }
    }

    pub fn without_bursts(mut self) -> Self {
        self.burst_every = 0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.target_snr_db.is_finite() {
            return Err(Error::domain("target_snr_db must be finite"));
        }
        if !(self.burst_factor >= 1.0 && self.burst_factor.is_finite()) {
            return Err(Error::domain("burst_factor must be at least 1"));
        }
        Ok(())
    }

    /// Whether zero-based frame `k` receives boosted noise.
    pub fn is_burst(&self, k: usize) -> bool {
        self.burst_every > 0 && (k + 1).is_multiple_of(self.burst_every)
    }
}

/// A simulated acquisition sequence with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<RFFrame>,
    pub truth: Vec<Point3>,
    /// Calibrated per-sample noise standard deviation on regular frames.
    pub noise_sigma: f64,
}

/// Simulate every frame of a trajectory. Noise is calibrated once against
/// [`CALIBRATION_POINT`]; each frame draws from its own stream so the output
/// does not depend on evaluation order.
pub fn simulate_sequence(
    geometry: &ArrayGeometry,
    spec: &TrajectorySpec,
    noise: &NoiseSpec,
) -> Result<Sequence> {
    geometry.validate()?;
    noise.validate()?;
    let truth = gen_trajectory(spec)?;
    let sigma = calibrate_noise(geometry, &CALIBRATION_POINT, noise.target_snr_db)?;
    let frames = truth
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let s = if noise.is_burst(k) {
                sigma * noise.burst_factor
            } else {
                sigma
            };
            simulate_frame(geometry, p, s, k, &mut frame_rng(noise.seed, k))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence {
        frames,
        truth,
        noise_sigma: sigma,
    })
}
