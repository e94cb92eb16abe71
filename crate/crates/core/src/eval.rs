//! Running trackers over sequences, per-frame results, summary metrics and
//! the depth-offset error matrix.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamformer::Beamformer;
use crate::error::{Error, Result};
use crate::features::brightest;
use crate::geometry::{ArrayGeometry, Point3, RFFrame};
use crate::kalman::Variant;
use crate::simulator::{simulate_sequence, NoiseSpec, TrajectoryKind, TrajectorySpec, TRAINING_AXIAL};
use crate::tracker::{Session, TrackerConfig};

/// Tracking method compared in evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "nnk")]
    Nnk,
    #[serde(rename = "nnk-rw")]
    NnkRw,
    #[serde(rename = "nnk-i")]
    NnkI,
    /// Brightest pixel, no elevation.
    #[serde(rename = "mi")]
    Mi,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Nnk, Method::NnkRw, Method::NnkI, Method::Mi];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nnk => "nnk",
            Method::NnkRw => "nnk-rw",
            Method::NnkI => "nnk-i",
            Method::Mi => "mi",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Nnk => Some(Variant::Nnk),
            Method::NnkRw => Some(Variant::NnkRw),
            Method::NnkI => Some(Variant::NnkI),
            Method::Mi => None,
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown method '{s}' (expected nnk, nnk-rw, nnk-i or mi)")))
    }
}

/// One line of a results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub frame: usize,
    pub truth_l: f64,
    pub truth_a: f64,
    pub truth_e: f64,
    pub est_l: f64,
    pub est_a_corrected: f64,
    pub est_a_apparent: f64,
    pub est_e: Option<f64>,
    pub est_delta: Option<f64>,
    pub err2d: f64,
    pub err3d: Option<f64>,
    pub coasted: u8,
    pub ms_reconstruct: Option<f64>,
    pub ms_features: Option<f64>,
    pub ms_nn: Option<f64>,
    pub ms_kalman: Option<f64>,
}

/// Lateral-axial distance to the truth.
pub fn error_2d(lateral: f64, axial: f64, truth: &Point3) -> f64 {
    (lateral - truth.lateral).hypot(axial - truth.axial)
}

/// 3D distance, comparing the offset magnitude with `|truth.elevational|`.
pub fn error_3d(lateral: f64, axial: f64, elevation: f64, truth: &Point3) -> f64 {
    error_2d(lateral, axial, truth).hypot(elevation - truth.elevational.abs())
}

/// Track `frames` with `method`. `config` supplies the network and filter
/// settings for the NNK variants; its variant is overridden by `method`.
/// With `timing` false the runtime columns are left empty so results are
/// reproducible byte for byte.
pub fn run_method(
    frames: &[RFFrame],
    truth: &[Point3],
    method: Method,
    config: Option<&TrackerConfig>,
    beamformer: Arc<Beamformer>,
    timing: bool,
) -> Result<Vec<ResultRow>> {
    if frames.len() != truth.len() {
        return Err(Error::domain("frame and ground-truth counts differ"));
    }
    let t = |v: f64| timing.then_some(v);
    match method.variant() {
        None => frames
            .iter()
            .zip(truth)
            .map(|(f, p)| {
                let t0 = Instant::now();
                let image = beamformer.reconstruct(f)?;
                let ms_rec = t0.elapsed().as_secs_f64() * 1e3;
                let t1 = Instant::now();
                let px = brightest(&image, 1)[0];
                let n_axial = image.grid.n_axial();
                let (l, a) = image.grid.pixel_to_mm(px / n_axial, px % n_axial)?;
                let ms_feat = t1.elapsed().as_secs_f64() * 1e3;
                Ok(ResultRow {
                    frame: f.frame_index,
                    truth_l: p.lateral,
                    truth_a: p.axial,
                    truth_e: p.elevational,
                    est_l: l,
                    est_a_corrected: a,
                    est_a_apparent: a,
                    est_e: None,
                    est_delta: None,
                    err2d: error_2d(l, a, p),
                    err3d: None,
                    coasted: 0,
                    ms_reconstruct: t(ms_rec),
                    ms_features: t(ms_feat),
                    ms_nn: None,
                    ms_kalman: None,
                })
            })
            .collect(),
        Some(variant) => {
            let mut cfg = config
                .ok_or_else(|| Error::domain(format!("method {} needs a trained model", method.name())))?
                .clone();
            cfg.variant = variant;
            let mut session = Session::with_beamformer(cfg, beamformer)?;
            frames
                .iter()
                .zip(truth)
                .map(|(f, p)| {
                    let e = session.step(f)?;
                    Ok(ResultRow {
                        frame: f.frame_index,
                        truth_l: p.lateral,
                        truth_a: p.axial,
                        truth_e: p.elevational,
                        est_l: e.lateral,
                        est_a_corrected: e.axial_corrected,
                        est_a_apparent: e.axial_apparent,
                        est_e: Some(e.elevation_magnitude),
                        est_delta: Some(e.aberration),
                        err2d: error_2d(e.lateral, e.axial_corrected, p),
                        err3d: Some(error_3d(e.lateral, e.axial_corrected, e.elevation_magnitude, p)),
                        coasted: e.coasted as u8,
                        ms_reconstruct: t(e.timing.reconstruct),
                        ms_features: t(e.timing.features),
                        ms_nn: t(e.timing.nn),
                        ms_kalman: t(e.timing.kalman),
                    })
                })
                .collect()
        }
    }
}

pub fn write_results<W: Write>(writer: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results<R: Read>(reader: R) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::parse(format!("results row {}", i + 1), e.to_string())))
        .collect()
}

/// Mean, standard deviation (n - 1 denominator) and maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn from_values(v: &[f64]) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::domain("no values to summarise"));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { mean, std, max })
    }
}

/// Mean per-frame stage times, ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeBreakdown {
    pub reconstruct: f64,
    pub features: f64,
    pub nn: f64,
    pub kalman: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub n_frames: usize,
    pub n_coasted: usize,
    pub err2d: ErrorStats,
    pub err3d: Option<ErrorStats>,
    pub runtime_ms: Option<RuntimeBreakdown>,
    pub err2d_series: Vec<f64>,
    pub err3d_series: Option<Vec<f64>>,
}

impl MethodMetrics {
    pub fn from_rows(method: &str, rows: &[ResultRow]) -> Result<Self> {
        let err2d_series: Vec<f64> = rows.iter().map(|r| r.err2d).collect();
        let err3d_series: Option<Vec<f64>> = rows.iter().map(|r| r.err3d).collect();
        let mean_of = |f: fn(&ResultRow) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = rows.iter().map(f).collect();
            v.map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64)
        };
        let (rec, feat) = (mean_of(|r| r.ms_reconstruct), mean_of(|r| r.ms_features));
        let runtime_ms = rec.zip(feat).map(|(reconstruct, features)| {
            let nn = mean_of(|r| r.ms_nn).unwrap_or(0.0);
            let kalman = mean_of(|r| r.ms_kalman).unwrap_or(0.0);
            RuntimeBreakdown {
                reconstruct,
                features,
                nn,
                kalman,
                total: reconstruct + features + nn + kalman,
            }
        });
        Ok(Self {
            method: method.to_string(),
            n_frames: rows.len(),
            n_coasted: rows.iter().filter(|r| r.coasted != 0).count(),
            err2d: ErrorStats::from_values(&err2d_series)?,
            err3d: err3d_series.as_deref().map(ErrorStats::from_values).transpose()?,
            runtime_ms,
            err2d_series,
            err3d_series,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub methods: Vec<MethodMetrics>,
}

impl MetricsReport {
    /// Summarise several runs over the same sequence.
    pub fn new(runs: &[(String, Vec<ResultRow>)]) -> Result<Self> {
        if let Some((_, first)) = runs.first() {
            if let Some((name, _)) = runs.iter().find(|(_, r)| r.len() != first.len()) {
                return Err(Error::domain(format!(
                    "run '{name}' has a different frame count than '{}'",
                    runs[0].0
                )));
            }
        }
        let methods = runs
            .iter()
            .map(|(name, rows)| MethodMetrics::from_rows(name, rows))
            .collect::<Result<_>>()?;
        Ok(Self {
            format_version: crate::io::FORMAT_VERSION,
            methods,
        })
    }

    /// Rows of `mean (std) [max]` in mm.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>26} {:>26} {:>10}\n", "method", "2D error", "3D error", "ms/frame");
        for m in &self.methods {
            let fmt = |e: &ErrorStats| format!("{:.3} ({:.3}) [{:.3}]", e.mean, e.std, e.max);
            let e3 = m.err3d.as_ref().map(fmt).unwrap_or_else(|| "-".into());
            let ms = m
                .runtime_ms
                .map(|r| format!("{:.1}", r.total))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{:<10} {:>26} {:>26} {:>10}", m.method, fmt(&m.err2d), e3, ms);
        }
        s
    }
}

/// Mean 3D error of the full tracker by depth and offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMatrix {
    pub depths: Vec<f64>,
    pub offsets: Vec<f64>,
    /// `cells[i][j]`: depth `i`, offset `j`.
    pub cells: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMatrixConfig {
    pub depths: Vec<f64>,
    pub offsets: Vec<f64>,
    pub lateral: f64,
    /// Axial distance travelled per frame along each line, mm.
    pub frame_step: f64,
    pub noise: NoiseSpec,
}

impl ErrorMatrixConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            depths: (1..=7).map(|k| 2.0 * k as f64).collect(),
            offsets: (0..=12).map(|k| 0.5 * k as f64).collect(),
            lateral: 0.0,
            frame_step: 0.05,
            noise: NoiseSpec::new(seed).without_bursts(),
        }
    }

    /// Half-width of the depth bin around each depth.
    fn half_bin(&self) -> f64 {
        let min_gap = self
            .depths
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        if min_gap.is_finite() {
            0.5 * min_gap
        } else {
            1.0
        }
    }
}

/// For every offset, track one axial line through all depths and average
/// the 3D error of the frames falling in each depth bin.
pub fn error_matrix(
    geometry: &ArrayGeometry,
    cfg: &ErrorMatrixConfig,
    tracker: &TrackerConfig,
    beamformer: Arc<Beamformer>,
) -> Result<ErrorMatrix> {
    if cfg.depths.is_empty() || cfg.offsets.is_empty() {
        return Err(Error::domain("error matrix needs at least one depth and one offset"));
    }
    if cfg.depths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("depths must be strictly increasing"));
    }
    if !(cfg.frame_step > 0.0) {
        return Err(Error::domain("frame_step must be positive"));
    }
    let half = cfg.half_bin();
    let start = (cfg.depths[0] - half).max(TRAINING_AXIAL.0);
    let end = (cfg.depths[cfg.depths.len() - 1] + half).min(TRAINING_AXIAL.1);
    let n_frames = ((end - start) / cfg.frame_step).round() as usize + 1;
    let columns = cfg
        .offsets
        .par_iter()
        .enumerate()
        .map(|(j, &offset)| {
            let spec = TrajectorySpec::new(
                TrajectoryKind::AxialLine {
                    lateral: cfg.lateral,
                    elevational: offset,
                    axial_start: start,
                    axial_end: end,
                },
                n_frames,
            );
            let noise = NoiseSpec {
                seed: cfg.noise.seed.wrapping_add(j as u64),
                ..cfg.noise
            };
            let seq = simulate_sequence(geometry, &spec, &noise)?;
            let rows = run_method(&seq.frames, &seq.truth, Method::Nnk, Some(tracker), beamformer.clone(), false)?;
            cfg.depths
                .iter()
                .map(|&d| {
                    let v: Vec<f64> = rows
                        .iter()
                        .filter(|r| (r.truth_a - d).abs() <= half + 1e-9)
                        .filter_map(|r| r.err3d)
                        .collect();
                    if v.is_empty() {
                        Err(Error::domain(format!("no frames near depth {d} mm")))
                    } else {
                        Ok(v.iter().sum::<f64>() / v.len() as f64)
                    }
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = (0..cfg.depths.len())
        .map(|i| columns.iter().map(|c| c[i]).collect())
        .collect();
    Ok(ErrorMatrix {
        depths: cfg.depths.clone(),
        offsets: cfg.offsets.clone(),
        cells,
    })
}

impl ErrorMatrix {
    /// Long format: `depth,offset,mean_err3d`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["depth", "offset", "mean_err3d"])?;
        for (i, d) in self.depths.iter().enumerate() {
            for (j, o) in self.offsets.iter().enumerate() {
                w.write_record([d.to_string(), o.to_string(), self.cells[i][j].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Cell with the largest error as `(depth, offset, error)`.
    pub fn worst(&self) -> (f64, f64, f64) {
        let mut best = (self.depths[0], self.offsets[0], f64::NEG_INFINITY);
        for (i, row) in self.cells.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best.2 {
                    best = (self.depths[i], self.offsets[j], v);
                }
            }
        }
        best
    }

    /// Heatmap with depth down and offset across.
    pub fn to_svg(&self) -> String {
        let (cw, ch, left, top) = (40.0, 30.0, 60.0, 40.0);
        let (nx, ny) = (self.offsets.len() as f64, self.depths.len() as f64);
        let hi = self.cells.iter().flatten().copied().fold(0.0f64, f64::max).max(1e-12);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"10\">\n",
            left + cw * nx + 20.0,
            top + ch * ny + 40.0
        );
        for (i, row) in self.cells.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let (x, y) = (left + cw * j as f64, top + ch * i as f64);
                let _ = writeln!(
                    s,
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{cw}\" height=\"{ch}\" fill=\"{}\"/><text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{v:.2}</text>",
                    heat_colour(v / hi),
                    x + cw / 2.0,
                    y + ch / 2.0 + 3.0
                );
            }
        }
        for (j, o) in self.offsets.iter().enumerate() {
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{o}</text>", left + cw * (j as f64 + 0.5), top - 8.0);
        }
        for (i, d) in self.depths.iter().enumerate() {
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{d}</text>", left - 6.0, top + ch * (i as f64 + 0.5) + 3.0);
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"14\" text-anchor=\"middle\">offset (mm)</text><text x=\"10\" y=\"{}\" transform=\"rotate(-90 10 {})\" text-anchor=\"middle\">depth (mm)</text>",
            left + cw * nx / 2.0,
            top + ch * ny / 2.0,
            top + ch * ny / 2.0
        );
        s.push_str("</svg>\n");
        s
    }
}

/// Dark blue through yellow for `t` in [0, 1].
fn heat_colour(t: f64) -> String {
    let stops = [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let x = t.clamp(0.0, 1.0) * (stops.len() - 1) as f64;
    let k = (x.floor() as usize).min(stops.len() - 2);
    let f = x - k as f64;
    let (a, b) = (stops[k], stops[k + 1]);
    let mix = |p: f64, q: f64| (p + f * (q - p)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}
