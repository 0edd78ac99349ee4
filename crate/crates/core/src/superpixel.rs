//! SLIC superpixels on 2D slices, superpixel geometry and the ground-truth
//! optimal labeling.

use std::collections::VecDeque;

use crate::error::{ensure, Error, Result};
use crate::image::{Grid2, Image};
use crate::volume::Grid3;

/// Intensities in [0,1] are scaled to the 0..100 lightness range of CIELAB
/// so compactness values carry over from colour SLIC unchanged.
const INTENSITY_SCALE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SlicConfig {
    /// Target superpixel side length in pixels.
    pub region_size: usize,
    pub compactness: f64,
    pub iterations: usize,
    /// Fragments smaller than this fraction of `region_size²` are merged.
    pub min_region_fraction: f64,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            region_size: 10,
            compactness: 10.0,
            iterations: 10,
            min_region_fraction: 0.25,
        }
    }
}

impl SlicConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.region_size >= 2,
            Error::InvalidArgument("region_size must be at least 2".into())
        );
        ensure!(
            self.iterations >= 1,
            Error::InvalidArgument("iterations must be at least 1".into())
        );
        ensure!(
            self.compactness > 0.0,
            Error::InvalidArgument("compactness must be positive".into())
        );
        ensure!(
            self.min_region_fraction > 0.0 && self.min_region_fraction <= 1.0,
            Error::InvalidArgument("min_region_fraction must lie in (0,1]".into())
        );
        Ok(())
    }
}

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

/// Axis-aligned rectangle in continuous pixel-edge coordinates: pixel `(i, j)`
/// covers `[i, i+1) × [j, j+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn contains(&self, other: &Rect) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

impl From<BBox> for Rect {
    fn from(b: BBox) -> Self {
        Rect {
            x0: b.x0 as f64,
            y0: b.y0 as f64,
            x1: (b.x1 + 1) as f64,
            y1: (b.y1 + 1) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelStats {
    pub pixel_count: usize,
    pub centroid: (f64, f64),
    pub bbox: BBox,
}

/// Partition of one slice into superpixels with contiguous ids `0..N`.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelMap {
    labels: Grid2<u32>,
    stats: Vec<SuperpixelStats>,
}

impl SuperpixelMap {
    /// Build from a label image; ids must be exactly `0..N` with none missing.
    pub fn from_labels(labels: Grid2<u32>) -> Result<Self> {
        let n = labels.data().iter().max().map_or(0, |&m| m as usize + 1);
        let (nx, ny) = labels.dims();
        let mut acc = vec![(0usize, 0f64, 0f64, usize::MAX, usize::MAX, 0usize, 0usize); n];
        for y in 0..ny {
            for x in 0..nx {
                let a = &mut acc[labels.get(x, y) as usize];
                a.0 += 1;
                a.1 += x as f64;
                a.2 += y as f64;
                a.3 = a.3.min(x);
                a.4 = a.4.min(y);
                a.5 = a.5.max(x);
                a.6 = a.6.max(y);
            }
        }
        ensure!(
            acc.iter().all(|a| a.0 > 0),
            Error::Data("superpixel ids are not contiguous".into())
        );
        let stats = acc
            .into_iter()
            .map(|(c, sx, sy, x0, y0, x1, y1)| SuperpixelStats {
                pixel_count: c,
                centroid: (sx / c as f64, sy / c as f64),
                bbox: BBox { x0, y0, x1, y1 },
            })
            .collect();
        Ok(Self { labels, stats })
    }

    pub fn count(&self) -> usize {
        self.stats.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    pub fn labels(&self) -> &Grid2<u32> {
        &self.labels
    }

    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels.get(x, y)
    }

    pub fn stats(&self) -> &[SuperpixelStats] {
        &self.stats
    }

    pub fn stat(&self, id: usize) -> Result<&SuperpixelStats> {
        self.stats.get(id).ok_or_else(|| {
            Error::InvalidArgument(format!("superpixel id {id} out of range 0..{}", self.count()))
        })
    }

    /// Pixel indices of each superpixel, in scan order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self
            .stats
            .iter()
            .map(|s| Vec::with_capacity(s.pixel_count))
            .collect();
        for (i, &l) in self.labels.data().iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    /// True where a 4-neighbour carries a different label.
    pub fn boundary_mask(&self) -> Grid2<bool> {
        let (nx, ny) = self.dims();
        Grid2::from_fn(nx, ny, |x, y| {
            let l = self.label(x, y);
            (x > 0 && self.label(x - 1, y) != l)
                || (x + 1 < nx && self.label(x + 1, y) != l)
                || (y > 0 && self.label(x, y - 1) != l)
                || (y + 1 < ny && self.label(x, y + 1) != l)
        })
    }

    /// Whether every superpixel is a single 4-connected region.
    pub fn is_connected(&self) -> bool {
        let (_, _, components) = components4(&self.labels.map(|l| l as i64));
        components == self.count()
    }

    /// Mask of the union of superpixels flagged in `selected`.
    pub fn fill(&self, selected: &[bool]) -> Result<Grid2<u8>> {
        ensure!(
            selected.len() == self.count(),
            Error::DimensionMismatch(format!(
                "{} flags for {} superpixels",
                selected.len(),
                self.count()
            ))
        );
        Ok(self.labels.map(|l| selected[l as usize] as u8))
    }
}

/// Stack per-slice label images into an int32 volume for storage.
pub fn stack_labels(maps: &[SuperpixelMap], spacing: [f64; 3]) -> Result<Grid3<i32>> {
    let slices: Vec<Grid2<i32>> = maps.iter().map(|m| m.labels.map(|l| l as i32)).collect();
    Grid3::from_slices(&slices, spacing)
}

pub fn unstack_labels(stack: &Grid3<i32>) -> Result<Vec<SuperpixelMap>> {
    stack
        .slices()
        .into_iter()
        .map(|s| {
            ensure!(
                s.data().iter().all(|&l| l >= 0),
                Error::Data("negative superpixel label".into())
            );
            SuperpixelMap::from_labels(s.map(|l| l as u32))
        })
        .collect()
}

/// 4-connected components of equal labels. Returns (component id per
/// pixel, component sizes, component count).
fn components4(labels: &Grid2<i64>) -> (Vec<usize>, Vec<usize>, usize) {
    let (nx, ny) = labels.dims();
    let mut comp = vec![usize::MAX; nx * ny];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..nx * ny {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let l = labels.data()[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % nx, i / nx);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels.data()[j] == l {
                    comp[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
        }
        sizes.push(size);
    }
    let n = sizes.len();
    (comp, sizes, n)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Split disconnected clusters into components and merge every component
/// smaller than `min_size` into its largest neighbour.
fn enforce_connectivity(labels: &Grid2<i64>, min_size: usize) -> Grid2<u32> {
    let (nx, ny) = labels.dims();
    let (comp, sizes, n) = components4(labels);

    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for y in 0..ny {
        for x in 0..nx {
            let a = comp[y * nx + x];
            if x + 1 < nx {
                let b = comp[y * nx + x + 1];
                if a != b {
                    adjacency[a].push(b);
                    adjacency[b].push(a);
                }
            }
            if y + 1 < ny {
                let b = comp[(y + 1) * nx + x];
                if a != b {
                    adjacency[a].push(b);
                    adjacency[b].push(a);
                }
            }
        }
    }
    for adj in &mut adjacency {
        adj.sort_unstable();
        adj.dedup();
    }

    let mut parent: Vec<usize> = (0..n).collect();
    let mut size = sizes.clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&c| (sizes[c], c));
    for c in order {
        let root = find(&mut parent, c);
        if size[root] >= min_size {
            continue;
        }
        // Neighbours of the merged group: scan members' adjacency lists.
        let mut best: Option<(usize, usize)> = None;
        for k in 0..n {
            if find(&mut parent, k) != root {
                continue;
            }
            for &nb in &adjacency[k] {
                let r = find(&mut parent, nb);
                if r == root {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bs, br)) => size[r] > bs || (size[r] == bs && r < br),
                };
                if better {
                    best = Some((size[r], r));
                }
            }
        }
        if let Some((_, target)) = best {
            parent[root] = target;
            size[target] += size[root];
        }
    }

    let mut relabel = vec![u32::MAX; n];
    let mut next = 0u32;
    let data = comp
        .iter()
        .map(|&c| {
            let r = find(&mut parent, c);
            if relabel[r] == u32::MAX {
                relabel[r] = next;
                next += 1;
            }
            relabel[r]
        })
        .collect();
    Grid2::from_vec(nx, ny, data).expect("same dims")
}

fn gradient_energy(img: &Image, x: usize, y: usize) -> f64 {
    let (x, y) = (x as isize, y as isize);
    let dx = img.get_clamped(x + 1, y) as f64 - img.get_clamped(x - 1, y) as f64;
    let dy = img.get_clamped(x, y + 1) as f64 - img.get_clamped(x, y - 1) as f64;
    dx * dx + dy * dy
}

/// SLIC superpixels on a normalized grey-level slice.
pub fn slic_2d(slice: &Image, cfg: &SlicConfig) -> Result<SuperpixelMap> {
    cfg.validate()?;
    let (nx, ny) = slice.dims();
    let s = cfg.region_size;
    ensure!(
        nx >= s && ny >= s,
        Error::InvalidArgument(format!(
            "slice {nx}x{ny} is smaller than one {s}x{s} region"
        ))
    );

    // Seed grid, each seed moved to the lowest-gradient pixel of its 3x3
    // neighbourhood.
    let kx = ((nx as f64 / s as f64).round() as usize).max(1);
    let ky = ((ny as f64 / s as f64).round() as usize).max(1);
    let step_x = nx as f64 / kx as f64;
    let step_y = ny as f64 / ky as f64;
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(kx * ky);
    for j in 0..ky {
        for i in 0..kx {
            let cx = ((i as f64 + 0.5) * step_x) as usize;
            let cy = ((j as f64 + 0.5) * step_y) as usize;
            let mut best = (f64::INFINITY, cx, cy);
            for yy in cy.saturating_sub(1)..=(cy + 1).min(ny - 1) {
                for xx in cx.saturating_sub(1)..=(cx + 1).min(nx - 1) {
                    let g = gradient_energy(slice, xx, yy);
                    if g < best.0 {
                        best = (g, xx, yy);
                    }
                }
            }
            let (_, bx, by) = best;
            centers.push([slice.get(bx, by) as f64 * INTENSITY_SCALE, bx as f64, by as f64]);
        }
    }

    let spatial_weight = (cfg.compactness / s as f64).powi(2);
    let mut labels = vec![-1i64; nx * ny];
    let mut dist = vec![f64::INFINITY; nx * ny];
    for _ in 0..cfg.iterations {
        labels.fill(-1);
        dist.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let x_lo = (c[1] - s as f64).floor().max(0.0) as usize;
            let x_hi = ((c[1] + s as f64).ceil() as usize).min(nx - 1);
            let y_lo = (c[2] - s as f64).floor().max(0.0) as usize;
            let y_hi = ((c[2] + s as f64).ceil() as usize).min(ny - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let i = y * nx + x;
                    let dl = slice.data()[i] as f64 * INTENSITY_SCALE - c[0];
                    let dx = x as f64 - c[1];
                    let dy = y as f64 - c[2];
                    let d = dl * dl + (dx * dx + dy * dy) * spatial_weight;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = k as i64;
                    }
                }
            }
        }
        let mut sums = vec![[0f64; 4]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l >= 0 {
                let acc = &mut sums[l as usize];
                acc[0] += slice.data()[i] as f64 * INTENSITY_SCALE;
                acc[1] += (i % nx) as f64;
                acc[2] += (i / nx) as f64;
                acc[3] += 1.0;
            }
        }
        for (c, acc) in centers.iter_mut().zip(&sums) {
            if acc[3] > 0.0 {
                *c = [acc[0] / acc[3], acc[1] / acc[3], acc[2] / acc[3]];
            }
        }
    }

    let raw = Grid2::from_vec(nx, ny, labels).expect("same dims");
    let min_size = ((cfg.min_region_fraction * (s * s) as f64).round() as usize).max(1);
    SuperpixelMap::from_labels(enforce_connectivity(&raw, min_size))
}

/// Per-superpixel strict-majority labels from a binary ground-truth slice.
///
/// This is the assignment with the fewest misclassified pixels. It is not in
/// general the Dice-maximizing one; see [`dice_optimal_selection`].
pub fn optimal_labeling(spmap: &SuperpixelMap, gt: &Grid2<u8>) -> Result<Vec<bool>> {
    Ok(foreground_counts(spmap, gt)?
        .into_iter()
        .map(|(f, n)| 2 * f > n)
        .collect())
}

/// Foreground pixel count and size of every superpixel.
pub fn foreground_counts(spmap: &SuperpixelMap, gt: &Grid2<u8>) -> Result<Vec<(usize, usize)>> {
    ensure!(
        spmap.labels.same_dims(gt),
        Error::DimensionMismatch(format!(
            "superpixels {:?} vs ground truth {:?}",
            spmap.dims(),
            gt.dims()
        ))
    );
    let mut fg = vec![0usize; spmap.count()];
    for (&l, &g) in spmap.labels.data().iter().zip(gt.data()) {
        if g != 0 {
            fg[l as usize] += 1;
        }
    }
    Ok(fg
        .into_iter()
        .zip(&spmap.stats)
        .map(|(f, st)| (f, st.pixel_count))
        .collect())
}

/// Exact Dice-maximizing binary assignment over a pooled set of superpixels
/// given as `(foreground, size)` pairs, plus the Dice it reaches.
///
/// Adding a region with foreground fraction `f` raises Dice `D` iff
/// `f > D / 2`, so the optimum is a prefix of the regions sorted by
/// decreasing fraction.
pub fn dice_optimal_selection(counts: &[(usize, usize)]) -> (Vec<bool>, f64) {
    let total_fg: usize = counts.iter().map(|c| c.0).sum();
    if total_fg == 0 {
        return (vec![false; counts.len()], 1.0);
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // f_a > f_b  <=>  fg_a * n_b > fg_b * n_a
    order.sort_by(|&a, &b| {
        let (fa, na) = counts[a];
        let (fb, nb) = counts[b];
        (fb * na).cmp(&(fa * nb)).then(a.cmp(&b))
    });
    let (mut inter, mut size) = (0usize, 0usize);
    let (mut best, mut best_k) = (0.0, 0);
    for (k, &i) in order.iter().enumerate() {
        inter += counts[i].0;
        size += counts[i].1;
        let d = 2.0 * inter as f64 / (size + total_fg) as f64;
        if d > best {
            best = d;
            best_k = k + 1;
        }
    }
    let mut selected = vec![false; counts.len()];
    for &i in &order[..best_k] {
        selected[i] = true;
    }
    (selected, best)
}

/// Tight bounding box of superpixel `id` grown by `scale` about its center and
/// clamped to the slice.
pub fn scaled_bbox(spmap: &SuperpixelMap, id: usize, scale: f64) -> Result<Rect> {
    ensure!(
        scale >= 1.0 && scale.is_finite(),
        Error::InvalidArgument(format!("scale {scale} must be >= 1"))
    );
    let tight = Rect::from(spmap.stat(id)?.bbox);
    let (nx, ny) = spmap.dims();
    let cx = 0.5 * (tight.x0 + tight.x1);
    let cy = 0.5 * (tight.y0 + tight.y1);
    let hw = 0.5 * tight.width() * scale;
    let hh = 0.5 * tight.height() * scale;
    Ok(Rect {
        x0: (cx - hw).max(0.0),
        y0: (cy - hh).max(0.0),
        x1: (cx + hw).min(nx as f64),
        y1: (cy + hh).min(ny as f64),
    })
}
