//! Multi-scale superpixel patches and the augmented training set.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rayon::prelude::*;

use super::warp::{random_tps_on_grid, TpsWarp};
use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::seed;
use crate::superpixel::{scaled_bbox, SuperpixelMap};

const MAGIC: &[u8; 8] = b"SPSEGDS\0";
const FORMAT_VERSION: u32 = 1;

/// Default scale factors for `n` scales: 1 → {1}, 2 → {1, 2}, otherwise
/// 1, 1.5, 2, ...
pub fn default_scales(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        2 => vec![1.0, 2.0],
        _ => (0..n).map(|i| 1.0 + 0.5 * i as f64).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub scales: Vec<f64>,
    /// Random deformations per patch (`N_t`); 0 means undeformed only.
    pub deformations: usize,
    pub grid: (usize, usize),
    /// Control-point displacement bound as a fraction of grid spacing.
    pub max_displacement: f64,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scales: default_scales(2),
            deformations: 8,
            grid: (4, 4),
            max_displacement: 0.25,
            patch_size: 64,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.scales.is_empty() && self.scales.iter().all(|&s| s >= 1.0 && s.is_finite()),
            Error::InvalidArgument("scales must be non-empty and each >= 1".into())
        );
        ensure!(
            (0.0..=0.5).contains(&self.max_displacement),
            Error::InvalidArgument("max_displacement must lie in [0, 0.5]".into())
        );
        ensure!(
            self.grid.0 >= 2 && self.grid.1 >= 2 && self.grid.0 * self.grid.1 >= 3,
            Error::InvalidArgument("control grid needs at least 2x2 points".into())
        );
        ensure!(
            self.patch_size >= 2,
            Error::InvalidArgument("patch_size must be at least 2".into())
        );
        Ok(())
    }

    /// Patches emitted per superpixel.
    pub fn factor(&self) -> usize {
        self.scales.len() * self.deformations.max(1)
    }
}

/// Random warp over the patch domain drawn from `rng`.
pub fn random_tps(cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<TpsWarp> {
    cfg.validate()?;
    random_tps_on_grid(cfg.grid, cfg.patch_size, cfg.max_displacement, rng)
}

/// Crop the scaled bounding box of superpixel `id`, optionally deform it in
/// patch coordinates, and resample to `patch_size²`.
pub fn sample_patch(
    slice: &Image,
    spmap: &SuperpixelMap,
    id: usize,
    scale: f64,
    warp: Option<&TpsWarp>,
    patch_size: usize,
) -> Result<Image> {
    ensure!(
        slice.same_dims(spmap.labels()),
        Error::DimensionMismatch(format!(
            "slice {:?} vs superpixels {:?}",
            slice.dims(),
            spmap.dims()
        ))
    );
    ensure!(patch_size >= 1, Error::InvalidArgument("empty patch".into()));
    let rect = scaled_bbox(spmap, id, scale)?;
    let sx = rect.width() / patch_size as f64;
    let sy = rect.height() / patch_size as f64;
    Ok(Image::from_fn(patch_size, patch_size, |i, j| {
        let q = [i as f64, j as f64];
        let q = warp.map_or(q, |w| w.apply(q));
        let x = rect.x0 + (q[0] + 0.5) * sx - 0.5;
        let y = rect.y0 + (q[1] + 0.5) * sy - 0.5;
        slice.sample_bilinear(x, y) as f32
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub volume: u32,
    pub slice: u32,
    pub superpixel: u32,
    pub scale_index: u16,
    pub deformation_index: u16,
}

/// Labeled patches, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    pub patch_size: usize,
    pub patches: Vec<f32>,
    pub labels: Vec<u8>,
    pub provenance: Vec<Provenance>,
}

impl PatchDataset {
    pub fn new(patch_size: usize) -> Self {
        Self {
            patch_size,
            patches: Vec::new(),
            labels: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let n = self.patch_size * self.patch_size;
        &self.patches[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, patch: &Image, label: u8, provenance: Provenance) -> Result<()> {
        ensure!(
            patch.dims() == (self.patch_size, self.patch_size),
            Error::DimensionMismatch(format!(
                "patch {:?} in a dataset of {} px patches",
                patch.dims(),
                self.patch_size
            ))
        );
        self.patches.extend_from_slice(patch.data());
        self.labels.push(label);
        self.provenance.push(provenance);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.patches.len() * 4 + self.len() * 17);
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(FORMAT_VERSION).unwrap();
        out.write_u64::<LE>(self.len() as u64).unwrap();
        out.write_u32::<LE>(self.patch_size as u32).unwrap();
        out.write_u32::<LE>(1).unwrap();
        for &v in &self.patches {
            out.write_f32::<LE>(v).unwrap();
        }
        out.extend_from_slice(&self.labels);
        for p in &self.provenance {
            out.write_u32::<LE>(p.volume).unwrap();
            out.write_u32::<LE>(p.slice).unwrap();
            out.write_u32::<LE>(p.superpixel).unwrap();
            out.write_u16::<LE>(p.scale_index).unwrap();
            out.write_u16::<LE>(p.deformation_index).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Data(format!("truncated dataset: {e}"));
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        ensure!(&magic == MAGIC, Error::Data("not a patch dataset file".into()));
        let version = r.read_u32::<LE>().map_err(bad)?;
        ensure!(
            version == FORMAT_VERSION,
            Error::Data(format!("unsupported dataset version {version}"))
        );
        let count = r.read_u64::<LE>().map_err(bad)? as usize;
        let patch_size = r.read_u32::<LE>().map_err(bad)? as usize;
        let label_width = r.read_u32::<LE>().map_err(bad)?;
        ensure!(label_width == 1, Error::Data(format!("label width {label_width} unsupported")));
        let values = count
            .checked_mul(patch_size * patch_size)
            .ok_or_else(|| Error::Data("dataset size overflow".into()))?;
        let expected = 28 + values * 4 + count * 17;
        ensure!(
            bytes.len() == expected,
            Error::PayloadSize {
                expected,
                found: bytes.len()
            }
        );
        let mut patches = Vec::with_capacity(values);
        for _ in 0..values {
            patches.push(r.read_f32::<LE>().map_err(bad)?);
        }
        let mut labels = vec![0u8; count];
        r.read_exact(&mut labels).map_err(bad)?;
        ensure!(labels.iter().all(|&l| l <= 1), Error::Data("labels must be 0 or 1".into()));
        let mut provenance = Vec::with_capacity(count);
        for _ in 0..count {
            provenance.push(Provenance {
                volume: r.read_u32::<LE>().map_err(bad)?,
                slice: r.read_u32::<LE>().map_err(bad)?,
                superpixel: r.read_u32::<LE>().map_err(bad)?,
                scale_index: r.read_u16::<LE>().map_err(bad)?,
                deformation_index: r.read_u16::<LE>().map_err(bad)?,
            });
        }
        Ok(Self {
            patch_size,
            patches,
            labels,
            provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// One slice's retained superpixels and their labels.
pub struct AugmentSource<'a> {
    pub volume: u32,
    pub slice: u32,
    pub image: &'a Image,
    pub spmap: &'a SuperpixelMap,
    /// Retained superpixel ids.
    pub retained: &'a [usize],
    /// Label per superpixel id (indexed by id, covering the whole map).
    pub labels: &'a [bool],
}

/// Emit `N_s · max(N_t, 1)` patches per retained superpixel. Each warp is
/// drawn from a stream seeded by (seed, volume, slice, superpixel, scale,
/// deformation), so output is independent of scheduling.
pub fn augment_training_set(
    sources: &[AugmentSource<'_>],
    cfg: &AugmentConfig,
) -> Result<PatchDataset> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for (s, src) in sources.iter().enumerate() {
        ensure!(
            src.labels.len() == src.spmap.count(),
            Error::DimensionMismatch(format!(
                "{} labels for {} superpixels",
                src.labels.len(),
                src.spmap.count()
            ))
        );
        for &id in src.retained {
            src.spmap.stat(id)?;
            for si in 0..cfg.scales.len() {
                for di in 0..cfg.deformations.max(1) {
                    jobs.push((s, id, si, di));
                }
            }
        }
    }
    ensure!(
        !jobs.is_empty(),
        Error::InvalidArgument("no retained superpixels to augment".into())
    );
    let patches: Vec<(Image, u8, Provenance)> = jobs
        .par_iter()
        .map(|&(s, id, si, di)| {
            let src = &sources[s];
            let warp = if cfg.deformations > 0 {
                let mut rng = seed::stream(
                    cfg.seed,
                    &[src.volume as u64, src.slice as u64, id as u64, si as u64, di as u64],
                );
                Some(random_tps(cfg, &mut rng)?)
            } else {
                None
            };
            let patch = sample_patch(src.image, src.spmap, id, cfg.scales[si], warp.as_ref(), cfg.patch_size)?;
            Ok((
                patch,
                src.labels[id] as u8,
                Provenance {
                    volume: src.volume,
                    slice: src.slice,
                    superpixel: id as u32,
                    scale_index: si as u16,
                    deformation_index: di as u16,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let mut ds = PatchDataset::new(cfg.patch_size);
    for (p, l, prov) in &patches {
        ds.push(p, *l, *prov)?;
    }
    Ok(ds)
}
