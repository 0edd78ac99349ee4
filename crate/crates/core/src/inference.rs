//! Dense probability maps: projection from superpixels, 3D Gaussian
//! smoothing and thresholding.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::superpixel::SuperpixelMap;
use crate::volume::{load_grid, save_grid, Grid3, LabelMask};

/// Default operating threshold on the smoothed map.
pub const DEFAULT_THRESHOLD: f64 = 0.4;

/// Per-voxel probability in [0, 1], aligned with a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap(Grid3<f32>);

impl ProbabilityMap {
    pub fn new(grid: Grid3<f32>) -> Result<Self> {
        ensure!(
            grid.data().iter().all(|v| (0.0..=1.0).contains(v)),
            Error::Data("probabilities must lie in [0, 1]".into())
        );
        Ok(Self(grid))
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Ok(Self(Grid3::filled(dims, spacing, 0.0)?))
    }

    pub fn grid(&self) -> &Grid3<f32> {
        &self.0
    }

    pub fn into_grid(self) -> Grid3<f32> {
        self.0
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0.dims()
    }

    pub fn values(&self) -> &[f32] {
        self.0.data()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_grid(&self.0, path, &[("Content", "probability")])
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(load_grid::<f32>(path)?.0)
    }
}

/// Assign each retained superpixel's probability to its pixels; everything
/// else is 0. `probabilities[z]` lists (superpixel id, p) for slice `z` and
/// must cover exactly the ids in `retained[z]`.
pub fn project_to_pixels(
    spmaps: &[SuperpixelMap],
    retained: &[Vec<usize>],
    probabilities: &[Vec<(usize, f64)>],
    spacing: [f64; 3],
) -> Result<ProbabilityMap> {
    ensure!(!spmaps.is_empty(), Error::InvalidArgument("no slices".into()));
    ensure!(
        retained.len() == spmaps.len() && probabilities.len() == spmaps.len(),
        Error::DimensionMismatch(format!(
            "{} slices, {} retained sets, {} probability lists",
            spmaps.len(),
            retained.len(),
            probabilities.len()
        ))
    );
    let (nx, ny) = spmaps[0].dims();
    ensure!(
        spmaps.iter().all(|s| s.dims() == (nx, ny)),
        Error::DimensionMismatch("superpixel maps differ in size".into())
    );
    let mut data = Vec::with_capacity(nx * ny * spmaps.len());
    for ((sp, kept), probs) in spmaps.iter().zip(retained).zip(probabilities) {
        let mut lut = vec![0.0f32; sp.count()];
        let mut given: HashMap<usize, f64> = HashMap::with_capacity(probs.len());
        for &(id, p) in probs {
            ensure!(
                (0.0..=1.0).contains(&p),
                Error::InvalidArgument(format!("probability {p} for superpixel {id} outside [0, 1]"))
            );
            ensure!(
                kept.contains(&id),
                Error::InvalidArgument(format!("superpixel {id} has a probability but is not retained"))
            );
            ensure!(
                given.insert(id, p).is_none(),
                Error::InvalidArgument(format!("superpixel {id} given twice"))
            );
        }
        for &id in kept {
            sp.stat(id)?;
            let p = given.get(&id).ok_or_else(|| {
                Error::InvalidArgument(format!("retained superpixel {id} has no probability"))
            })?;
            lut[id] = *p as f32;
        }
        data.extend(sp.labels().data().iter().map(|&l| lut[l as usize]));
    }
    ProbabilityMap::new(Grid3::new([nx, ny, spmaps.len()], spacing, data)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothConfig {
    /// Standard deviation in voxels, identical along every axis.
    pub sigma: f64,
    /// Kernel radius as a multiple of sigma (rounded up).
    pub truncate: f64,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            truncate: 4.0,
        }
    }
}

impl SmoothConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.sigma > 0.0 && self.sigma.is_finite(),
            Error::InvalidArgument(format!("sigma must be positive, got {}", self.sigma))
        );
        ensure!(
            self.truncate >= 2.0 && self.truncate.is_finite(),
            Error::InvalidArgument(format!("truncation must be at least 2 sigma, got {}", self.truncate))
        );
        Ok(())
    }

    pub fn radius(&self) -> usize {
        (self.truncate * self.sigma).ceil() as usize
    }
}

/// Sampled Gaussian on [-r, r], normalized to sum 1.
pub fn gaussian_kernel(cfg: &SmoothConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let r = cfg.radius() as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * cfg.sigma * cfg.sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / s).collect())
}

/// Mirror index into [0, n) with the edge sample repeated (… b a | a b …).
pub fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn smooth_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let n = dims[axis];
    let stride = strides[axis];
    let mut out = vec![0.0; data.len()];
    // One task per output z-plane; each voxel only reads `data`.
    out.par_chunks_mut(dims[0] * dims[1])
        .enumerate()
        .for_each(|(z, plane)| {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let pos = [x, y, z][axis] as isize;
                    let base = x + y * dims[0] + z * dims[0] * dims[1] - pos as usize * stride;
                    let mut acc = 0.0;
                    for (k, w) in kernel.iter().enumerate() {
                        acc += w * data[base + reflect(pos + k as isize - r, n) * stride];
                    }
                    plane[x + y * dims[0]] = acc;
                }
            }
        });
    out
}

/// Separable 3D Gaussian along x, y, then z with reflective boundaries.
pub fn gaussian_smooth_3d(map: &ProbabilityMap, cfg: &SmoothConfig) -> Result<ProbabilityMap> {
    let kernel = gaussian_kernel(cfg)?;
    let dims = map.dims();
    let mut data: Vec<f64> = map.values().iter().map(|&v| v as f64).collect();
    for axis in 0..3 {
        data = smooth_axis(&data, dims, axis, &kernel);
    }
    let out = data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    ProbabilityMap::new(Grid3::new(dims, map.grid().spacing(), out)?)
}

/// Mask of voxels strictly above `p`.
pub fn threshold_map(map: &ProbabilityMap, p: f64) -> Result<LabelMask> {
    ensure!(
        (0.0..=1.0).contains(&p),
        Error::InvalidArgument(format!("threshold {p} outside [0, 1]"))
    );
    let g = map.grid();
    let data = g.data().iter().map(|&v| (v as f64 > p) as u8).collect();
    LabelMask::new(Grid3::new(g.dims(), g.spacing(), data)?)
}
