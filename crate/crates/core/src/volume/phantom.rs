//! Synthetic abdominal phantoms.
//!
//! The target is a superellipsoid bent along a parabolic spine, wrapped in a
//! partial low-intensity fat margin and embedded in textured soft tissue with
//! a few rounder distractor blobs of intermediate intensity.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Grid3, IntensityKind, LabelMask, Volume};
use crate::error::{ensure, Error, Result};
use crate::seed;

pub const MIN_DIMS: [usize; 3] = [32, 32, 8];

const TISSUE_HU: f64 = 40.0;
const FAT_HU: f64 = -100.0;
const NOISE_SIGMA_HU: f64 = 8.0;
const SUPERELLIPSE_EXPONENT: f64 = 2.5;
const MARGIN_VOXELS: u32 = 3;
const DISTRACTOR_CLEARANCE: u32 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Number of distractor blobs (neighboring structures) besides the target.
    pub blob_count: usize,
    /// Ratio of the target's long in-plane semi-axis to its short one.
    pub blob_elongation: f64,
    /// Relative amplitude of the multiplicative texture noise.
    pub texture_amplitude: f64,
    /// Target intensity above the surrounding soft tissue, in HU.
    pub contrast_gap: f64,
    /// Fraction of the target margin covered by fat.
    pub fat_margin_fraction: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [96, 96, 32],
            spacing: [0.8, 0.8, 2.5],
            seed: 0,
            blob_count: 3,
            blob_elongation: 4.0,
            texture_amplitude: 0.03,
            contrast_gap: 20.0,
            fat_margin_fraction: 0.6,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.dims.iter().zip(MIN_DIMS).all(|(&d, m)| d >= m),
            Error::InvalidArgument(format!(
                "phantom dims {:?} below minimum {:?}",
                self.dims, MIN_DIMS
            ))
        );
        ensure!(
            self.spacing.iter().all(|&s| s > 0.0),
            Error::NonPositiveSpacing(self.spacing)
        );
        ensure!(
            self.contrast_gap >= 0.0,
            Error::InvalidArgument("contrast_gap must be non-negative".into())
        );
        ensure!(
            (0.0..=1.0).contains(&self.fat_margin_fraction),
            Error::InvalidArgument("fat_margin_fraction must lie in [0,1]".into())
        );
        ensure!(
            self.blob_elongation >= 1.0,
            Error::InvalidArgument("blob_elongation must be at least 1".into())
        );
        ensure!(
            self.texture_amplitude >= 0.0,
            Error::InvalidArgument("texture_amplitude must be non-negative".into())
        );
        Ok(())
    }
}

/// Smoothly interpolated lattice noise in [-1, 1].
struct ValueNoise {
    cell: f64,
    lattice: [usize; 3],
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, dims: [usize; 3], cell: f64) -> Self {
        let lattice = dims.map(|d| (d as f64 / cell).ceil() as usize + 2);
        let n = lattice.iter().product();
        let values = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self {
            cell,
            lattice,
            values,
        }
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        let fade = |t: f64| t * t * (3.0 - 2.0 * t);
        let p = [x, y, z].map(|c| c as f64 / self.cell);
        let i = p.map(|c| c.floor() as usize);
        let f = [fade(p[0] - i[0] as f64), fade(p[1] - i[1] as f64), fade(p[2] - i[2] as f64)];
        let [lx, ly, _] = self.lattice;
        let v = |a: usize, b: usize, c: usize| self.values[((i[2] + c) * ly + i[1] + b) * lx + i[0] + a];
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let x00 = lerp(v(0, 0, 0), v(1, 0, 0), f[0]);
        let x10 = lerp(v(0, 1, 0), v(1, 1, 0), f[0]);
        let x01 = lerp(v(0, 0, 1), v(1, 0, 1), f[0]);
        let x11 = lerp(v(0, 1, 1), v(1, 1, 1), f[0]);
        lerp(lerp(x00, x10, f[1]), lerp(x01, x11, f[1]), f[2])
    }
}

struct BentBlob {
    center: [f64; 3],
    semi_axes: [f64; 3],
    angle: f64,
    curvature: f64,
}

impl BentBlob {
    fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let dx = x as f64 - self.center[0];
        let dy = y as f64 - self.center[1];
        let dz = z as f64 - self.center[2];
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c - self.curvature * u * u;
        let e = SUPERELLIPSE_EXPONENT;
        (u / self.semi_axes[0]).abs().powf(e)
            + (v / self.semi_axes[1]).abs().powf(e)
            + (dz / self.semi_axes[2]).abs().powf(e)
            <= 1.0
    }
}

fn rasterize(dims: [usize; 3], blob: &BentBlob) -> Vec<bool> {
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                out.push(blob.contains(x, y, z));
            }
        }
    }
    out
}

fn neighbors6(dims: [usize; 3], i: usize) -> impl Iterator<Item = usize> {
    let [nx, ny, nz] = dims;
    let x = i % nx;
    let y = (i / nx) % ny;
    let z = i / (nx * ny);
    let plane = nx * ny;
    [
        (x > 0).then(|| i - 1),
        (x + 1 < nx).then(|| i + 1),
        (y > 0).then(|| i - nx),
        (y + 1 < ny).then(|| i + nx),
        (z > 0).then(|| i - plane),
        (z + 1 < nz).then(|| i + plane),
    ]
    .into_iter()
    .flatten()
}

/// Keep only the largest 6-connected component.
fn largest_component(dims: [usize; 3], mask: &mut [bool]) {
    let mut comp = vec![u32::MAX; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || comp[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0usize;
        comp[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbors6(dims, i) {
                if mask[j] && comp[j] == u32::MAX {
                    comp[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    if sizes.len() <= 1 {
        return;
    }
    let best = (0..sizes.len()).max_by_key(|&k| (sizes[k], std::cmp::Reverse(k))).unwrap() as u32;
    for (m, c) in mask.iter_mut().zip(&comp) {
        *m = *m && *c == best;
    }
}

/// City-block distance from the mask, saturating at `limit + 1`.
fn distance_from(dims: [usize; 3], mask: &[bool], limit: u32) -> Vec<u32> {
    let mut dist = vec![limit + 1; mask.len()];
    let mut queue = VecDeque::new();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        if dist[i] >= limit {
            continue;
        }
        for j in neighbors6(dims, i) {
            if dist[j] > dist[i] + 1 {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    dist
}

/// Generate a phantom volume (HU) and its target mask.
pub fn make_phantom(cfg: &PhantomConfig) -> Result<(Volume, LabelMask)> {
    cfg.validate()?;
    let dims = cfg.dims;
    let [nx, ny, nz] = dims.map(|d| d as f64);
    let mut rng = seed::stream(cfg.seed, &[0x5048_414e]);

    let long = rng.random_range(0.25..0.32) * nx;
    let short = long / cfg.blob_elongation;
    let bend = rng.random_range(0.5..1.5) * short;
    let target = BentBlob {
        center: [
            rng.random_range(0.42..0.58) * nx,
            rng.random_range(0.40..0.60) * ny,
            rng.random_range(0.40..0.60) * nz,
        ],
        semi_axes: [long, short, rng.random_range(0.18..0.25) * nz],
        angle: rng.random_range(-0.5..0.5),
        curvature: bend / (long * long) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
    };
    let mut organ = rasterize(dims, &target);
    largest_component(dims, &mut organ);

    let near = distance_from(dims, &organ, DISTRACTOR_CLEARANCE);
    let mut distractor = vec![false; organ.len()];
    for _ in 0..cfg.blob_count {
        for _attempt in 0..50 {
            let r = rng.random_range(0.06..0.10) * nx;
            let blob = BentBlob {
                center: [
                    rng.random_range(0.1..0.9) * nx,
                    rng.random_range(0.1..0.9) * ny,
                    rng.random_range(0.2..0.8) * nz,
                ],
                semi_axes: [r, r * rng.random_range(0.7..1.0), rng.random_range(0.15..0.3) * nz],
                angle: rng.random_range(0.0..std::f64::consts::PI),
                curvature: 0.0,
            };
            let cells = rasterize(dims, &blob);
            let clear = cells
                .iter()
                .zip(&near)
                .all(|(&c, &d)| !c || d > DISTRACTOR_CLEARANCE);
            if clear {
                for (d, c) in distractor.iter_mut().zip(cells) {
                    *d |= c;
                }
                break;
            }
        }
    }

    // Fat covers a fixed fraction of the margin band, chosen by thresholding a
    // smooth field so the coverage comes in contiguous stretches.
    let margin_field = ValueNoise::new(&mut rng, dims, 8.0);
    let margin = distance_from(dims, &organ, MARGIN_VOXELS);
    let mut band: Vec<(f64, usize)> = Vec::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = (z * dims[1] + y) * dims[0] + x;
                if (1..=MARGIN_VOXELS).contains(&margin[i]) && !distractor[i] {
                    band.push((margin_field.at(x, y, z), i));
                }
            }
        }
    }
    band.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let fat_count = (cfg.fat_margin_fraction * band.len() as f64).round() as usize;
    let mut fat = vec![false; organ.len()];
    for &(_, i) in &band[..fat_count] {
        fat[i] = true;
    }

    let background = ValueNoise::new(&mut rng, dims, 24.0);
    let pockets = ValueNoise::new(&mut rng, dims, 12.0);
    let fine = ValueNoise::new(&mut rng, dims, 3.0);
    let medium = ValueNoise::new(&mut rng, dims, 6.0);
    let noise = Normal::new(0.0, NOISE_SIGMA_HU).expect("valid sigma");

    let mut voxels = Vec::with_capacity(organ.len());
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let texture = (fine.at(x, y, z) + 0.5 * medium.at(x, y, z)) / 1.5;
                let (base, amplitude) = if organ[i] {
                    (TISSUE_HU + cfg.contrast_gap, 1.5 * cfg.texture_amplitude)
                } else if fat[i] {
                    (FAT_HU, cfg.texture_amplitude)
                } else if distractor[i] {
                    (TISSUE_HU + 0.6 * cfg.contrast_gap, 0.5 * cfg.texture_amplitude)
                } else if pockets.at(x, y, z) > 0.6 {
                    (FAT_HU, cfg.texture_amplitude)
                } else {
                    (TISSUE_HU + 25.0 * background.at(x, y, z), cfg.texture_amplitude)
                };
                let hu = (base + 1000.0) * (1.0 + amplitude * texture) - 1000.0
                    + noise.sample(&mut rng);
                voxels.push(hu as f32);
                i += 1;
            }
        }
    }

    let volume = Volume::new(Grid3::new(dims, cfg.spacing, voxels)?, IntensityKind::Hounsfield)?;
    let mask = LabelMask::new(Grid3::new(
        dims,
        cfg.spacing,
        organ.iter().map(|&b| b as u8).collect(),
    )?)?;
    Ok((volume, mask))
}
