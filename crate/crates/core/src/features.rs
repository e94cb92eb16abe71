//! Measurements extracted from a frame: the amplitude marker fed to the
//! network and the brightest image pixels fed to the filter.

use std::cmp::Ordering;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{RFFrame, USImage};

/// Standard normal quantile at 0.99. Samples beyond `mean ± z·std` are the
/// upper and lower 1% tails of the fitted Gaussian.
pub const TAIL_QUANTILE: f64 = 2.326_347_874_040_841;

/// Lower bound on pixel-coordinate variances, (0.01 mm)².
pub const VARIANCE_FLOOR: f64 = 1e-4;

pub const DEFAULT_N_PIXELS: usize = 15;

/// Mean absolute value of the samples lying in the 1% tails of a Gaussian
/// fitted to the whole frame. Returns 0 when no sample qualifies.
pub fn amplitude_marker(frame: &RFFrame) -> f64 {
    let data = frame.data();
    if data.is_empty() {
        return 0.0;
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let spread = TAIL_QUANTILE * var.sqrt();
    let (hi, lo) = (mean + spread, mean - spread);
    let (sum, count) = data
        .iter()
        .map(|&v| v as f64)
        .filter(|&v| v > hi || v < lo)
        .fold((0.0, 0usize), |(s, c), v| (s + v.abs(), c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Coordinates of the brightest pixels and their spread.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelObservations {
    pub y_lateral: Vec<f64>,
    pub y_axial: Vec<f64>,
    /// Unbiased sample variance of `y_lateral`, mm².
    pub s2_lateral: f64,
    /// Unbiased sample variance of `y_axial`, mm².
    pub s2_axial: f64,
}

impl PixelObservations {
    pub fn new(y_lateral: Vec<f64>, y_axial: Vec<f64>) -> Result<Self> {
        if y_lateral.len() != y_axial.len() || y_lateral.len() < 2 {
            return Err(Error::domain(
                "observations need two equally long coordinate lists of length >= 2",
            ));
        }
        let s2_lateral = sample_variance(&y_lateral);
        let s2_axial = sample_variance(&y_axial);
        Ok(Self {
            y_lateral,
            y_axial,
            s2_lateral,
            s2_axial,
        })
    }

    pub fn len(&self) -> usize {
        self.y_lateral.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_lateral.is_empty()
    }

    pub fn mean_lateral(&self) -> f64 {
        mean(&self.y_lateral)
    }

    pub fn mean_axial(&self) -> f64 {
        mean(&self.y_axial)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Pixel ordering: brighter first, then by axial index, then lateral index.
pub(crate) fn brightness_order(image: &USImage, a: usize, b: usize) -> Ordering {
    let v = image.intensity();
    let n_axial = image.grid.n_axial();
    v[b].abs()
        .total_cmp(&v[a].abs())
        .then((a % n_axial).cmp(&(b % n_axial)))
        .then((a / n_axial).cmp(&(b / n_axial)))
}

/// Storage indices of the `n` brightest pixels in [`brightness_order`].
pub(crate) fn brightest(image: &USImage, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..image.intensity().len()).collect();
    let cmp = |a: &usize, b: &usize| brightness_order(image, *a, *b);
    if n < idx.len() {
        idx.select_nth_unstable_by(n, cmp);
        idx.truncate(n);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// The `n` pixels of largest absolute intensity, in mm.
pub fn top_intensity_pixels(image: &USImage, n: usize) -> Result<PixelObservations> {
    if n < 2 {
        return Err(Error::domain("at least two pixels are needed for a variance"));
    }
    if image.intensity().len() < n {
        return Err(Error::domain(format!(
            "image has {} pixels, {n} requested",
            image.intensity().len()
        )));
    }
    let n_axial = image.grid.n_axial();
    let (lat, ax): (Vec<f64>, Vec<f64>) = brightest(image, n)
        .into_iter()
        .map(|p| (image.grid.lateral_at(p / n_axial), image.grid.axial_at(p % n_axial)))
        .unzip();
    PixelObservations::new(lat, ax)
}

/// Diagonal pixel-noise covariance: lateral variance on the first `n`
/// entries and axial variance on the last `n`, each floored at
/// [`VARIANCE_FLOOR`].
pub fn measurement_noise(obs: &PixelObservations) -> DMatrix<f64> {
    let n = obs.len();
    let (l, a) = floored_variances(obs);
    DMatrix::from_fn(2 * n, 2 * n, |r, c| match (r == c, r < n) {
        (true, true) => l,
        (true, false) => a,
        _ => 0.0,
    })
}

pub(crate) fn floored_variances(obs: &PixelObservations) -> (f64, f64) {
    (
        obs.s2_lateral.max(VARIANCE_FLOOR),
        obs.s2_axial.max(VARIANCE_FLOOR),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ArrayGeometry, ImageGrid};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn small_grid() -> ImageGrid {
        ImageGrid::new(0.0, 0.4, 1.0, 1.3, 0.1).unwrap() // 5 x 4
    }

    fn noise_frame(n_sources: usize, len: usize, seed: u64) -> RFFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n_sources * len)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        RFFrame::from_data(n_sources, len, data, 0).unwrap()
    }

    /// E[|X| given |X| > z] for a standard normal: φ(z) / (1 - Φ(z)) with
    /// 1 - Φ(z) = 0.01 by construction of z.
    fn truncated_abs_mean() -> f64 {
        let z = TAIL_QUANTILE;
        (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() / 0.01
    }

    #[test]
    fn tail_quantile_matches_normal_cdf() {
        // Φ(z) by Simpson integration of the density on [0, z].
        let z = TAIL_QUANTILE;
        let m = 2000;
        let h = z / m as f64;
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(0.0) + pdf(z);
        for k in 1..m {
            s += pdf(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert_relative_eq!(0.5 + s * h / 3.0, 0.99, epsilon = 1e-10);
    }

    #[test]
    fn marker_of_zero_frame_is_zero() {
        let g = ArrayGeometry::default();
        assert_eq!(amplitude_marker(&RFFrame::zeros(&g, 0)), 0.0);
    }

    #[test]
    fn marker_of_gaussian_noise() {
        let oracle = truncated_abs_mean();
        assert_relative_eq!(oracle, 2.6652, epsilon = 1e-3);
        let mu = amplitude_marker(&noise_frame(64, 1400, 5));
        assert_relative_eq!(mu, oracle, epsilon = 0.02);
    }

    #[test]
    fn marker_scales_with_amplitude() {
        let f = noise_frame(8, 500, 9);
        let mu = amplitude_marker(&f);
        for alpha in [3.0f32, -0.25] {
            let scaled: Vec<f32> = f.data().iter().map(|v| v * alpha).collect();
            let g = RFFrame::from_data(8, 500, scaled, 0).unwrap();
            assert_relative_eq!(amplitude_marker(&g), alpha.abs() as f64 * mu, max_relative = 1e-5);
        }
    }

    #[test]
    fn single_hot_pixel_with_tie_break() {
        let grid = small_grid();
        let mut img = USImage::zeros(grid);
        img.set(3, 2, -5.0);
        let obs = top_intensity_pixels(&img, 2).unwrap();
        assert_relative_eq!(obs.y_lateral[0], 0.3, epsilon = 1e-12);
        assert_eq!(obs.y_lateral[1], 0.0);
        assert_relative_eq!(obs.y_axial[0], 1.2, epsilon = 1e-12);
        assert_relative_eq!(obs.y_axial[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_image_takes_first_pixels_in_tie_order() {
        let grid = small_grid();
        let img = USImage::from_data(grid, vec![1.0; grid.len()]).unwrap();
        let obs = top_intensity_pixels(&img, 3).unwrap();
        // Axial index 0 first, walking laterally.
        for (k, l) in obs.y_lateral.iter().enumerate() {
            assert_relative_eq!(*l, 0.1 * k as f64, epsilon = 1e-12);
        }
        assert_eq!(obs.y_axial, vec![1.0, 1.0, 1.0]);
        assert_relative_eq!(obs.s2_lateral, 0.01, epsilon = 1e-12);
        assert_eq!(obs.s2_axial, 0.0);
    }

    #[test]
    fn rejects_too_few_pixels() {
        let img = USImage::zeros(small_grid());
        assert!(top_intensity_pixels(&img, 1).is_err());
        assert!(top_intensity_pixels(&img, 21).is_err());
    }

    #[test]
    fn marked_pixels_are_found() {
        let grid = ImageGrid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f32> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut img = USImage::from_data(grid, data).unwrap();
        let mut marked = Vec::new();
        for k in 0..15 {
            let (i, j) = (rng.random_range(0..501), rng.random_range(0..361));
            if marked.contains(&(i, j)) {
                continue;
            }
            img.set(i, j, if k % 2 == 0 { 10.0 + k as f32 } else { -10.0 - k as f32 });
            marked.push((i, j));
        }
        let obs = top_intensity_pixels(&img, marked.len()).unwrap();
        let mut got: Vec<(usize, usize)> = obs
            .y_lateral
            .iter()
            .zip(&obs.y_axial)
            .map(|(&l, &a)| grid.mm_to_pixel(l, a).unwrap())
            .collect();
        got.sort();
        marked.sort();
        assert_eq!(got, marked);
    }

    #[test]
    fn noise_matrix_examples() {
        let obs = PixelObservations {
            y_lateral: vec![0.0, 1.0],
            y_axial: vec![0.0, 2.0],
            s2_lateral: 1.0,
            s2_axial: 4.0,
        };
        assert_eq!(
            measurement_noise(&obs),
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1.0, 4.0, 4.0]))
        );
        let flat = PixelObservations::new(vec![1.0; 3], vec![2.0; 3]).unwrap();
        let r = measurement_noise(&flat);
        assert_eq!(r.nrows(), 6);
        assert!((0..6).all(|k| r[(k, k)] == VARIANCE_FLOOR));
        assert_eq!(r.sum(), 6.0 * VARIANCE_FLOOR);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn image_strategy() -> impl Strategy<Value = Vec<i8>> {
            // Small integer range forces plenty of ties.
            proptest::collection::vec(-6i8..6, 20)
        }

        proptest! {
            #[test]
            fn matches_full_sort(values in image_strategy(), n in 2usize..20) {
                let grid = small_grid();
                let img = USImage::from_data(grid, values.iter().map(|&v| v as f32).collect()).unwrap();
                let mut all: Vec<usize> = (0..20).collect();
                all.sort_by(|&a, &b| brightness_order(&img, a, b));
                all.truncate(n);
                prop_assert_eq!(brightest(&img, n), all);
            }

            #[test]
            fn invariant_to_positive_scaling(values in image_strategy(), scale in 0.01f32..100.0) {
                let grid = small_grid();
                let img = USImage::from_data(grid, values.iter().map(|&v| v as f32).collect()).unwrap();
                let scaled = USImage::from_data(grid, values.iter().map(|&v| v as f32 * scale).collect()).unwrap();
                prop_assert_eq!(top_intensity_pixels(&img, 5).unwrap(), top_intensity_pixels(&scaled, 5).unwrap());
            }

            #[test]
            fn variances_match_one_pass_oracle(l in proptest::collection::vec(-10.0f64..10.0, 2..30)) {
                let a: Vec<f64> = l.iter().map(|x| 0.5 * x + 3.0).collect();
                let obs = PixelObservations::new(l.clone(), a).unwrap();
                let n = l.len() as f64;
                let (s, ss) = l.iter().fold((0.0, 0.0), |(s, ss), x| (s + x, ss + x * x));
                let oracle = (ss - s * s / n) / (n - 1.0);
                prop_assert!((obs.s2_lateral - oracle).abs() <= 1e-9 * (1.0 + oracle));
                prop_assert!((obs.s2_axial - 0.25 * oracle).abs() <= 1e-9 * (1.0 + oracle));
            }
        }
    }
}
