//! Delay-and-sum reconstruction of the in-plane image.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, ImageGrid, Point3, RFFrame, USImage};

/// Pixels per parallel work unit.
const CHUNK: usize = 4096;

/// Delay-and-sum beamformer with a precomputed nearest-sample delay table.
///
/// Delays that fall outside the record point at a zero pad sample, so they
/// contribute nothing to the sum.
#[derive(Debug, Clone)]
pub struct Beamformer {
    geometry: ArrayGeometry,
    grid: ImageGrid,
    /// `delays[s * n_pixels + p]`: sample index of pixel `p` in trace `s`.
    delays: Vec<u32>,
}

impl Beamformer {
    pub fn new(geometry: &ArrayGeometry, grid: &ImageGrid) -> Result<Self> {
        geometry.validate()?;
        grid.validate()?;
        let n_pixels = grid.len();
        let n_axial = grid.n_axial();
        let len = geometry.record_length;
        let scale = geometry.sampling_rate / geometry.speed_of_sound;
        let detector = geometry.detector_position;

        let receive: Vec<f64> = (0..n_pixels)
            .map(|p| pixel_point(grid, p / n_axial, p % n_axial).distance(&detector))
            .collect();
        let mut delays = vec![0u32; geometry.num_sources * n_pixels];
        delays
            .par_chunks_mut(n_pixels)
            .enumerate()
            .for_each(|(s, row)| {
                let src = geometry.source(s);
                for (p, d) in row.iter_mut().enumerate() {
                    let q = pixel_point(grid, p / n_axial, p % n_axial);
                    let k = (scale * (src.distance(&q) + receive[p])).round();
                    *d = if k >= 0.0 && k < len as f64 {
                        k as u32
                    } else {
                        len as u32
                    };
                }
            });
        Ok(Self {
            geometry: geometry.clone(),
            grid: *grid,
            delays,
        })
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geometry
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    /// Signed delay-and-sum image of `frame`; no apodization.
    pub fn reconstruct(&self, frame: &RFFrame) -> Result<USImage> {
        frame.check_geometry(&self.geometry)?;
        let len = self.geometry.record_length;
        let n_pixels = self.grid.len();
        // Each trace followed by one zero sample for out-of-window delays.
        let mut padded = vec![0.0f32; self.geometry.num_sources * (len + 1)];
        for s in 0..self.geometry.num_sources {
            padded[s * (len + 1)..s * (len + 1) + len].copy_from_slice(frame.trace(s));
        }
        let mut image = USImage::zeros(self.grid);
        image
            .intensity_mut()
            .par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(c, out)| {
                let start = c * CHUNK;
                for s in 0..self.geometry.num_sources {
                    let trace = &padded[s * (len + 1)..(s + 1) * (len + 1)];
                    let idx = &self.delays[s * n_pixels + start..s * n_pixels + start + out.len()];
                    for (v, &k) in out.iter_mut().zip(idx) {
                        *v += trace[k as usize];
                    }
                }
            });
        Ok(image)
    }
}

fn pixel_point(grid: &ImageGrid, i: usize, j: usize) -> Point3 {
    Point3::new(grid.lateral_at(i), grid.axial_at(j), 0.0)
}

/// One-shot reconstruction; builds the delay table on every call. Prefer a
/// [`Beamformer`] when imaging a sequence.
pub fn das_reconstruct(frame: &RFFrame, geometry: &ArrayGeometry, grid: &ImageGrid) -> Result<USImage> {
    frame.check_geometry(geometry)?;
    Beamformer::new(geometry, grid)?.reconstruct(frame)
}

/// Apparent depth of a target under a collocated source/receiver model:
/// the in-plane point with the same range.
pub fn apparent_axial_oracle(target: &Point3) -> Result<f64> {
    if !(target.axial > 0.0) {
        return Err(Error::domain("target axial coordinate must be positive"));
    }
    Ok(target.axial.hypot(target.elevational))
}
