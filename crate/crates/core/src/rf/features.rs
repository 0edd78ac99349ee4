//! Hand-crafted patch features for the forest cascade.
//!
//! Layout (version 1):
//!
//! | index  | feature                                      |
//! |--------|----------------------------------------------|
//! | 0..5   | intensity mean, std, min, max, median        |
//! | 5..13  | 8-bin intensity histogram over [0,1] (fractions) |
//! | 13..15 | gradient magnitude mean, std                 |
//! | 15     | center intensity                             |
//! | 16, 17 | normalized x, y position                     |
//! | 18     | distance to slice center / half diagonal     |
//!
//! The first 16 entries describe appearance only; the last three locate
//! the patch in the slice. Level-two vectors append the level-one
//! probability at the center and its window mean and std.

use crate::error::{ensure, Error, Result};
use crate::image::Image;

pub const FEATURE_VERSION: u32 = 1;
pub const HISTOGRAM_BINS: usize = 8;
pub const APPEARANCE_FEATURES: usize = 16;
pub const BASE_FEATURES: usize = 19;
pub const CONTEXT_FEATURES: usize = 3;
pub const CASCADE_FEATURES: usize = BASE_FEATURES + CONTEXT_FEATURES;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureVector {
    pub version: u32,
    pub values: Vec<f64>,
}

impl PatchFeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn appearance(&self) -> &[f64] {
        &self.values[..APPEARANCE_FEATURES.min(self.values.len())]
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Central-difference gradient magnitude with edge replication.
pub fn gradient_magnitude(slice: &Image) -> Image {
    let (nx, ny) = slice.dims();
    Image::from_fn(nx, ny, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let gx = 0.5 * (slice.get_clamped(x + 1, y) - slice.get_clamped(x - 1, y));
        let gy = 0.5 * (slice.get_clamped(x, y + 1) - slice.get_clamped(x, y - 1));
        (gx * gx + gy * gy).sqrt()
    })
}

/// Patch feature extraction over one slice with the gradient image cached.
pub struct FeatureExtractor<'a> {
    slice: &'a Image,
    gradient: Image,
    half: isize,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(slice: &'a Image, patch_size: usize) -> Result<Self> {
        ensure!(
            patch_size % 2 == 1,
            Error::InvalidArgument(format!("patch_size {patch_size} must be odd"))
        );
        Ok(Self {
            slice,
            gradient: gradient_magnitude(slice),
            half: (patch_size / 2) as isize,
        })
    }

    pub fn patch_size(&self) -> usize {
        2 * self.half as usize + 1
    }

    fn window<'b>(&self, img: &'b Image, x: usize, y: usize) -> impl Iterator<Item = f64> + Clone + 'b {
        let h = self.half;
        let (cx, cy) = (x as isize, y as isize);
        (cy - h..=cy + h)
            .flat_map(move |yy| (cx - h..=cx + h).map(move |xx| img.get_clamped(xx, yy) as f64))
    }

    pub fn extract(&self, x: usize, y: usize) -> PatchFeatureVector {
        let mut values = Vec::with_capacity(BASE_FEATURES);
        let mut patch: Vec<f64> = self.window(self.slice, x, y).collect();
        let (mean, std) = mean_std(patch.iter().copied());
        let min = patch.iter().copied().fold(f64::INFINITY, f64::min);
        let max = patch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut hist = [0f64; HISTOGRAM_BINS];
        for &v in &patch {
            let b = ((v * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
            hist[b] += 1.0;
        }
        let n = patch.len() as f64;
        let mid = patch.len() / 2;
        let median = *patch.select_nth_unstable_by(mid, f64::total_cmp).1;
        values.extend_from_slice(&[mean, std, min, max, median]);
        values.extend(hist.iter().map(|h| h / n));
        let (gmean, gstd) = mean_std(self.window(&self.gradient, x, y));
        values.extend_from_slice(&[gmean, gstd, self.slice.get(x, y) as f64]);

        let (nx, ny) = self.slice.dims();
        let norm = |c: usize, n: usize| if n > 1 { c as f64 / (n - 1) as f64 } else { 0.5 };
        let (px, py) = (norm(x, nx), norm(y, ny));
        let half_diag = 0.5 * ((nx * nx + ny * ny) as f64).sqrt();
        let dx = x as f64 + 0.5 - 0.5 * nx as f64;
        let dy = y as f64 + 0.5 - 0.5 * ny as f64;
        values.extend_from_slice(&[px, py, (dx * dx + dy * dy).sqrt() / half_diag]);
        debug_assert_eq!(values.len(), BASE_FEATURES);
        PatchFeatureVector {
            version: FEATURE_VERSION,
            values,
        }
    }

    /// Level-two vector: base features plus level-one context at the same
    /// window.
    pub fn extract_with_context(&self, x: usize, y: usize, level1: &Image) -> PatchFeatureVector {
        let mut fv = self.extract(x, y);
        let (mean, std) = mean_std(self.window(level1, x, y));
        fv.values.extend_from_slice(&[level1.get(x, y) as f64, mean, std]);
        fv
    }
}

/// Features of a single patch centered on `(x, y)`.
pub fn extract_patch_features(
    slice: &Image,
    center: (usize, usize),
    patch_size: usize,
) -> Result<PatchFeatureVector> {
    let (nx, ny) = slice.dims();
    ensure!(
        center.0 < nx && center.1 < ny,
        Error::InvalidArgument(format!("center {center:?} outside {nx}x{ny} slice"))
    );
    Ok(FeatureExtractor::new(slice, patch_size)?.extract(center.0, center.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_patch() {
        let img = Image::filled(40, 40, 0.3);
        let fv = extract_patch_features(&img, (20, 20), 9).unwrap();
        assert_eq!(fv.len(), BASE_FEATURES);
        let v = &fv.values;
        assert!((v[0] - 0.3f32 as f64).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
        assert_eq!(v[2], v[3]);
        assert_eq!(v[13], 0.0);
        assert_eq!(v[14], 0.0);
        assert_eq!(v[5 + 2], 1.0);
    }

    #[test]
    fn constant_image_is_translation_invariant_in_appearance() {
        let img = Image::filled(40, 40, 0.8);
        let a = extract_patch_features(&img, (5, 7), 25).unwrap();
        let b = extract_patch_features(&img, (30, 22), 25).unwrap();
        assert_eq!(a.appearance(), b.appearance());
        assert_ne!(a.values[16..], b.values[16..]);
    }

    #[test]
    fn step_edge_has_gradient() {
        let img = Image::from_fn(30, 30, |x, _| if x < 15 { 0.0 } else { 1.0 });
        let fv = extract_patch_features(&img, (15, 15), 5).unwrap();
        assert!(fv.values[13] > 0.0);
    }

    #[test]
    fn even_patch_is_rejected() {
        let img = Image::filled(10, 10, 0.0);
        assert!(extract_patch_features(&img, (1, 1), 4).is_err());
    }

    #[test]
    fn all_entries_finite_at_corners() {
        let img = Image::from_fn(12, 9, |x, y| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        for (x, y) in [(0, 0), (11, 8), (0, 8), (11, 0)] {
            let fv = extract_patch_features(&img, (x, y), 25).unwrap();
            assert!(fv.values.iter().all(|v| v.is_finite()));
        }
    }
}
