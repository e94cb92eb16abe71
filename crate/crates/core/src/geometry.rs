//! Shared coordinate, array and image types.
//!
//! Coordinates are millimetres in the array frame: `lateral` along the
//! array, `axial` into the medium, `elevational` out of the image plane.
//! Times are microseconds and frequencies megahertz, so a speed of sound in
//! mm/µs multiplies directly with times.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the array frame (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub lateral: f64,
    pub axial: f64,
    pub elevational: f64,
}

impl Point3 {
    pub const fn new(lateral: f64, axial: f64, elevational: f64) -> Self {
        Self {
            lateral,
            axial,
            elevational,
        }
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        let dl = self.lateral - other.lateral;
        let da = self.axial - other.axial;
        let de = self.elevational - other.elevational;
        (dl * dl + da * da + de * de).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.lateral.is_finite() && self.axial.is_finite() && self.elevational.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.lateral, self.axial, self.elevational]
    }
}

/// Linear source array with a single receiving detector.
///
/// Sources sit on the lateral axis (axial 0, elevational 0). The detector is
/// a separate point receiver placed next to the aperture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryFields")]
pub struct ArrayGeometry {
    pub num_sources: usize,
    /// mm
    pub aperture_width: f64,
    /// Lateral coordinate of each source, mm.
    pub source_positions: Vec<f64>,
    pub detector_position: Point3,
    /// mm/µs
    pub speed_of_sound: f64,
    /// MHz
    pub sampling_rate: f64,
    /// Samples per trace.
    pub record_length: usize,
    /// MHz
    pub pulse_center_frequency: f64,
    pub pulse_fractional_bandwidth: f64,
    /// Radius of the circular source elements, mm.
    pub element_radius: f64,
}

/// Default element radius (mm). Keeps `k·a` just below the first zero of
/// J1 so the elevational directivity is monotone over the half-space.
pub const DEFAULT_ELEMENT_RADIUS: f64 = 0.08;

impl Default for ArrayGeometry {
    fn default() -> Self {
        Self::new(64, 25.0)
    }
}

impl ArrayGeometry {
    /// Evenly spaced array centred on the origin with default acquisition
    /// parameters and the detector 0.5 mm past the positive aperture edge.
    pub fn new(num_sources: usize, aperture_width: f64) -> Self {
        Self {
            num_sources,
            aperture_width,
            source_positions: even_positions(num_sources, aperture_width),
            detector_position: Point3::new(aperture_width / 2.0 + 0.5, 0.0, 0.0),
            speed_of_sound: 1.5,
            sampling_rate: 50.0,
            record_length: 1400,
            pulse_center_frequency: 7.5,
            pulse_fractional_bandwidth: 1.0,
            element_radius: DEFAULT_ELEMENT_RADIUS,
        }
    }

    pub fn source(&self, s: usize) -> Point3 {
        Point3::new(self.source_positions[s], 0.0, 0.0)
    }

    /// Sample period in µs.
    pub fn sample_period(&self) -> f64 {
        1.0 / self.sampling_rate
    }

    /// Deepest point whose in-plane echo from the array centre fits in the record.
    pub fn max_record_depth(&self) -> f64 {
        self.record_length as f64 * self.sample_period() * self.speed_of_sound / 2.0
    }

    /// Acoustic wavenumber at the pulse centre frequency, rad/mm.
    pub fn wavenumber(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.pulse_center_frequency / self.speed_of_sound
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sources < 2 {
            return Err(Error::domain("geometry needs at least two sources"));
        }
        if self.source_positions.len() != self.num_sources {
            return Err(Error::domain(format!(
                "source_positions has {} entries, num_sources is {}",
                self.source_positions.len(),
                self.num_sources
            )));
        }
        let positive = [
            ("aperture_width", self.aperture_width),
            ("speed_of_sound", self.speed_of_sound),
            ("sampling_rate", self.sampling_rate),
            ("pulse_center_frequency", self.pulse_center_frequency),
            ("pulse_fractional_bandwidth", self.pulse_fractional_bandwidth),
            ("element_radius", self.element_radius),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::domain(format!("{name} must be positive and finite")));
            }
        }
        if self.record_length == 0 {
            return Err(Error::domain("record_length must be positive"));
        }
        if !self.detector_position.is_finite() {
            return Err(Error::domain("detector_position must be finite"));
        }
        let tol = 1e-9 * self.aperture_width.max(1.0);
        let pos = &self.source_positions;
        if pos.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("source_positions must be strictly increasing"));
        }
        for (a, b) in pos.iter().zip(pos.iter().rev()) {
            if (a + b).abs() > tol {
                return Err(Error::domain("source_positions must be symmetric about 0"));
            }
        }
        let span = pos[pos.len() - 1] - pos[0];
        if (span - self.aperture_width).abs() > tol {
            return Err(Error::domain("source_positions must span aperture_width"));
        }
        Ok(())
    }
}

fn even_positions(n: usize, width: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    let pitch = width / (n - 1) as f64;
    (0..n).map(|s| -width / 2.0 + s as f64 * pitch).collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryFields {
    num_sources: usize,
    aperture_width: f64,
    source_positions: Vec<f64>,
    detector_position: Point3,
    speed_of_sound: f64,
    sampling_rate: f64,
    record_length: usize,
    pulse_center_frequency: f64,
    pulse_fractional_bandwidth: f64,
    element_radius: f64,
}

impl TryFrom<GeometryFields> for ArrayGeometry {
    type Error = Error;

    fn try_from(f: GeometryFields) -> Result<Self> {
        let g = ArrayGeometry {
            num_sources: f.num_sources,
            aperture_width: f.aperture_width,
            source_positions: f.source_positions,
            detector_position: f.detector_position,
            speed_of_sound: f.speed_of_sound,
            sampling_rate: f.sampling_rate,
            record_length: f.record_length,
            pulse_center_frequency: f.pulse_center_frequency,
            pulse_fractional_bandwidth: f.pulse_fractional_bandwidth,
            element_radius: f.element_radius,
        };
        g.validate()?;
        Ok(g)
    }
}

/// One acquisition: a trace per source, stored source-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RFFrame {
    num_sources: usize,
    record_length: usize,
    data: Vec<f32>,
    pub frame_index: usize,
}

impl RFFrame {
    pub fn zeros(geometry: &ArrayGeometry, frame_index: usize) -> Self {
        Self {
            num_sources: geometry.num_sources,
            record_length: geometry.record_length,
            data: vec![0.0; geometry.num_sources * geometry.record_length],
            frame_index,
        }
    }

    pub fn from_data(
        num_sources: usize,
        record_length: usize,
        data: Vec<f32>,
        frame_index: usize,
    ) -> Result<Self> {
        if data.len() != num_sources * record_length {
            return Err(Error::domain(format!(
                "frame holds {} samples, expected {num_sources}x{record_length}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("frame contains non-finite samples"));
        }
        Ok(Self {
            num_sources,
            record_length,
            data,
            frame_index,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.num_sources
    }

    pub fn record_length(&self) -> usize {
        self.record_length
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn trace(&self, s: usize) -> &[f32] {
        &self.data[s * self.record_length..(s + 1) * self.record_length]
    }

    pub fn matches(&self, geometry: &ArrayGeometry) -> bool {
        self.num_sources == geometry.num_sources && self.record_length == geometry.record_length
    }

    pub(crate) fn check_geometry(&self, geometry: &ArrayGeometry) -> Result<()> {
        if self.matches(geometry) {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "frame is {}x{}, geometry expects {}x{}",
                self.num_sources, self.record_length, geometry.num_sources, geometry.record_length
            )))
        }
    }
}

/// Regular pixel grid of the in-plane image (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridFields")]
pub struct ImageGrid {
    pub lateral_min: f64,
    pub lateral_max: f64,
    pub axial_min: f64,
    pub axial_max: f64,
    pub pixel_pitch: f64,
}

impl Default for ImageGrid {
    fn default() -> Self {
        Self {
            lateral_min: -12.5,
            lateral_max: 12.5,
            axial_min: 0.5,
            axial_max: 18.5,
            pixel_pitch: 0.05,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFields {
    lateral_min: f64,
    lateral_max: f64,
    axial_min: f64,
    axial_max: f64,
    pixel_pitch: f64,
}

impl TryFrom<GridFields> for ImageGrid {
    type Error = Error;

    fn try_from(f: GridFields) -> Result<Self> {
        ImageGrid::new(f.lateral_min, f.lateral_max, f.axial_min, f.axial_max, f.pixel_pitch)
    }
}

impl ImageGrid {
    pub fn new(
        lateral_min: f64,
        lateral_max: f64,
        axial_min: f64,
        axial_max: f64,
        pixel_pitch: f64,
    ) -> Result<Self> {
        let grid = Self {
            lateral_min,
            lateral_max,
            axial_min,
            axial_max,
            pixel_pitch,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.lateral_min,
            self.lateral_max,
            self.axial_min,
            self.axial_max,
            self.pixel_pitch,
        ];
        if vals.iter().any(|v| !v.is_finite()) || self.pixel_pitch <= 0.0 {
            return Err(Error::domain("grid bounds must be finite and pitch positive"));
        }
        if self.axial_min < 0.0 {
            return Err(Error::domain("grid must lie in front of the array"));
        }
        if self.n_lateral() < 2 || self.n_axial() < 2 {
            return Err(Error::domain("grid needs at least two pixels per axis"));
        }
        Ok(())
    }

    pub fn n_lateral(&self) -> usize {
        count(self.lateral_max - self.lateral_min, self.pixel_pitch)
    }

    pub fn n_axial(&self) -> usize {
        count(self.axial_max - self.axial_min, self.pixel_pitch)
    }

    pub fn len(&self) -> usize {
        self.n_lateral() * self.n_axial()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear storage index of pixel `(i, j)`; lateral-major.
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n_axial() + j
    }

    #[inline]
    pub(crate) fn lateral_at(&self, i: usize) -> f64 {
        self.lateral_min + i as f64 * self.pixel_pitch
    }

    #[inline]
    pub(crate) fn axial_at(&self, j: usize) -> f64 {
        self.axial_min + j as f64 * self.pixel_pitch
    }

    /// Centre of pixel `(i, j)` as `(lateral, axial)` mm.
    pub fn pixel_to_mm(&self, i: usize, j: usize) -> Result<(f64, f64)> {
        if i >= self.n_lateral() || j >= self.n_axial() {
            return Err(Error::domain(format!(
                "pixel ({i}, {j}) outside {}x{} grid",
                self.n_lateral(),
                self.n_axial()
            )));
        }
        Ok((self.lateral_at(i), self.axial_at(j)))
    }

    /// Nearest pixel to a point inside the grid bounds.
    pub fn mm_to_pixel(&self, lateral: f64, axial: f64) -> Result<(usize, usize)> {
        let eps = 1e-9 * self.pixel_pitch;
        let inside = |v: f64, lo: f64, hi: f64| v.is_finite() && v >= lo - eps && v <= hi + eps;
        if !inside(lateral, self.lateral_min, self.lateral_max)
            || !inside(axial, self.axial_min, self.axial_max)
        {
            return Err(Error::domain(format!(
                "({lateral}, {axial}) mm lies outside the image grid"
            )));
        }
        // f64::round rounds half away from zero.
        let i = ((lateral - self.lateral_min) / self.pixel_pitch).round() as usize;
        let j = ((axial - self.axial_min) / self.pixel_pitch).round() as usize;
        Ok((i.min(self.n_lateral() - 1), j.min(self.n_axial() - 1)))
    }
}

fn count(span: f64, pitch: f64) -> usize {
    let n = (span / pitch).round();
    if n.is_finite() && n >= 0.0 {
        n as usize + 1
    } else {
        0
    }
}

/// Reconstructed in-plane image holding signed delay-and-sum values.
#[derive(Debug, Clone, PartialEq)]
pub struct USImage {
    pub grid: ImageGrid,
    intensity: Vec<f32>,
}

impl USImage {
    pub fn zeros(grid: ImageGrid) -> Self {
        Self {
            grid,
            intensity: vec![0.0; grid.len()],
        }
    }

    pub fn from_data(grid: ImageGrid, intensity: Vec<f32>) -> Result<Self> {
        if intensity.len() != grid.len() {
            return Err(Error::domain(format!(
                "image holds {} pixels, grid has {}",
                intensity.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, intensity })
    }

    pub fn intensity(&self) -> &[f32] {
        &self.intensity
    }

    pub fn intensity_mut(&mut self) -> &mut [f32] {
        &mut self.intensity
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.intensity[self.grid.index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f32) {
        let k = self.grid.index(i, j);
        self.intensity[k] = value;
    }
}
