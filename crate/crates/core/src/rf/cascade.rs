//! Two-level forest cascade producing dense response maps, and retention of
//! high-response superpixels.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::features::{FeatureExtractor, BASE_FEATURES, CASCADE_FEATURES, FEATURE_VERSION};
use super::forest::{train_forest, ForestConfig, ForestReport, RandomForestModel, Samples};
use crate::error::{ensure, Error, Result};
use crate::image::{Grid2, Image};
use crate::seed;
use crate::superpixel::SuperpixelMap;

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    pub patch_size: usize,
    pub stride: usize,
    /// Level two runs only where level one reaches this probability.
    pub gate: f64,
    /// Scale applied to level-one values below the gate.
    pub pass_through: f64,
    pub forest: ForestConfig,
    /// Negatives kept per positive when subsampling training points.
    pub negative_ratio: f64,
    /// Cap on training points per level.
    pub max_samples: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            patch_size: 25,
            stride: 4,
            gate: 0.2,
            pass_through: 1.0,
            forest: ForestConfig::default(),
            negative_ratio: 0.5,
            max_samples: 40_000,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.patch_size % 2 == 1,
            Error::InvalidArgument(format!("patch_size {} must be odd", self.patch_size))
        );
        ensure!(self.stride >= 1, Error::InvalidArgument("stride must be positive".into()));
        ensure!(
            (0.0..=1.0).contains(&self.gate),
            Error::InvalidArgument("gate must lie in [0,1]".into())
        );
        ensure!(
            (0.0..=1.0).contains(&self.pass_through),
            Error::InvalidArgument("pass_through must lie in [0,1]".into())
        );
        ensure!(
            self.negative_ratio > 0.0 && self.max_samples >= 2,
            Error::InvalidArgument("invalid sampling settings".into())
        );
        Ok(())
    }
}

/// Per-pixel p_RF for one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap(Image);

impl ResponseMap {
    pub fn new(image: Image) -> Result<Self> {
        ensure!(
            image.data().iter().all(|v| (0.0..=1.0).contains(v)),
            Error::Data("response values must lie in [0,1]".into())
        );
        Ok(Self(image))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cascade {
    pub level1: RandomForestModel,
    pub level2: RandomForestModel,
}

#[derive(Clone, Debug)]
pub struct CascadeOutput {
    pub response: ResponseMap,
    /// Grid points where level two was evaluated.
    pub level2_evaluations: usize,
}

/// Grid coordinates along one axis: multiples of `stride` plus the last pixel.
fn axis_grid(n: usize, stride: usize) -> Vec<usize> {
    let mut g: Vec<usize> = (0..n).step_by(stride).collect();
    if *g.last().unwrap() != n - 1 {
        g.push(n - 1);
    }
    g
}

struct StrideGrid {
    xs: Vec<usize>,
    ys: Vec<usize>,
}

impl StrideGrid {
    fn new(nx: usize, ny: usize, stride: usize) -> Self {
        Self {
            xs: axis_grid(nx, stride),
            ys: axis_grid(ny, stride),
        }
    }

    fn points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ys.iter().flat_map(move |&y| self.xs.iter().map(move |&x| (x, y)))
    }

    /// Bilinear interpolation of grid values (row-major over `ys`, `xs`).
    fn interpolate(&self, values: &[f64], nx: usize, ny: usize) -> Image {
        let locate = |axis: &[usize], c: usize| -> (usize, f64) {
            if axis.len() == 1 {
                return (0, 0.0);
            }
            let k = axis.partition_point(|&a| a <= c).clamp(1, axis.len() - 1) - 1;
            let t = (c - axis[k]) as f64 / (axis[k + 1] - axis[k]) as f64;
            (k, t)
        };
        let gx = self.xs.len();
        let at = |i: usize, j: usize| values[j * gx + i];
        Image::from_fn(nx, ny, |x, y| {
            let (i, tx) = locate(&self.xs, x);
            let (j, ty) = locate(&self.ys, y);
            let i1 = (i + 1).min(gx - 1);
            let j1 = (j + 1).min(self.ys.len() - 1);
            let top = at(i, j) + (at(i1, j) - at(i, j)) * tx;
            let bottom = at(i, j1) + (at(i1, j1) - at(i, j1)) * tx;
            (top + (bottom - top) * ty).clamp(0.0, 1.0) as f32
        })
    }
}

fn check_pair(level1: &RandomForestModel, level2: &RandomForestModel) -> Result<()> {
    ensure!(
        level1.feature_version == level2.feature_version,
        Error::Model(format!(
            "feature version mismatch: level one {} vs level two {}",
            level1.feature_version, level2.feature_version
        ))
    );
    ensure!(
        level1.feature_version == FEATURE_VERSION,
        Error::Model(format!(
            "unsupported feature version {}",
            level1.feature_version
        ))
    );
    ensure!(
        level1.feature_count == BASE_FEATURES && level2.feature_count == CASCADE_FEATURES,
        Error::Model(format!(
            "cascade expects {BASE_FEATURES}/{CASCADE_FEATURES} features, models have {}/{}",
            level1.feature_count, level2.feature_count
        ))
    );
    Ok(())
}

/// Dense level-one map from stride-grid evaluations.
fn level1_map(
    level1: &RandomForestModel,
    ex: &FeatureExtractor<'_>,
    grid: &StrideGrid,
    nx: usize,
    ny: usize,
) -> Result<(Vec<f64>, Image)> {
    let values = grid
        .points()
        .map(|(x, y)| level1.predict(&ex.extract(x, y).values))
        .collect::<Result<Vec<f64>>>()?;
    let dense = grid.interpolate(&values, nx, ny);
    Ok((values, dense))
}

pub fn cascade_apply(
    level1: &RandomForestModel,
    level2: &RandomForestModel,
    slice: &Image,
    cfg: &CascadeConfig,
) -> Result<CascadeOutput> {
    cfg.validate()?;
    check_pair(level1, level2)?;
    let (nx, ny) = slice.dims();
    let ex = FeatureExtractor::new(slice, cfg.patch_size)?;
    let grid = StrideGrid::new(nx, ny, cfg.stride);
    let (l1, dense1) = level1_map(level1, &ex, &grid, nx, ny)?;
    let mut evaluations = 0;
    let mut out = Vec::with_capacity(l1.len());
    for ((x, y), &p1) in grid.points().zip(&l1) {
        if p1 >= cfg.gate {
            evaluations += 1;
            out.push(level2.predict(&ex.extract_with_context(x, y, &dense1).values)?);
        } else {
            out.push((p1 * cfg.pass_through).clamp(0.0, 1.0));
        }
    }
    Ok(CascadeOutput {
        response: ResponseMap::new(grid.interpolate(&out, nx, ny))?,
        level2_evaluations: evaluations,
    })
}

impl Cascade {
    pub fn apply(&self, slice: &Image, cfg: &CascadeConfig) -> Result<CascadeOutput> {
        cascade_apply(&self.level1, &self.level2, slice, cfg)
    }
}

/// One annotated training slice.
pub struct TrainingSlice<'a> {
    pub case: usize,
    pub image: &'a Image,
    pub mask: &'a Grid2<u8>,
}

#[derive(Clone, Debug)]
pub struct CascadeReport {
    pub level1: ForestReport,
    pub level2: ForestReport,
}

struct PointSet {
    rows: Vec<f64>,
    labels: Vec<bool>,
    width: usize,
}

/// Keep every positive and up to `ratio` negatives per positive, capped at
/// `max` points overall; selection is seeded.
fn balance(set: PointSet, ratio: f64, max: usize, seed_value: u64) -> Result<PointSet> {
    let pos: Vec<usize> = (0..set.labels.len()).filter(|&i| set.labels[i]).collect();
    let mut neg: Vec<usize> = (0..set.labels.len()).filter(|&i| !set.labels[i]).collect();
    ensure!(
        !pos.is_empty() && !neg.is_empty(),
        Error::Data("cascade training points contain a single class".into())
    );
    let mut rng = seed::stream(seed_value, &[0x42414c]);
    let mut pos = pos;
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let keep_pos = pos.len().min(max / 2).max(1);
    let keep_neg = ((keep_pos as f64 * ratio).ceil() as usize)
        .min(neg.len())
        .min(max - keep_pos)
        .max(1);
    let mut chosen: Vec<usize> = pos[..keep_pos].iter().chain(&neg[..keep_neg]).copied().collect();
    chosen.sort_unstable();
    let w = set.width;
    Ok(PointSet {
        rows: chosen
            .iter()
            .flat_map(|&i| set.rows[i * w..(i + 1) * w].iter().copied())
            .collect(),
        labels: chosen.iter().map(|&i| set.labels[i]).collect(),
        width: w,
    })
}

fn train_level(set: &PointSet, cfg: &ForestConfig) -> Result<(RandomForestModel, ForestReport)> {
    train_forest(
        &Samples {
            features: &set.rows,
            labels: &set.labels,
            feature_count: set.width,
        },
        FEATURE_VERSION,
        cfg,
    )
}

fn level1_points(slices: &[TrainingSlice<'_>], cfg: &CascadeConfig) -> Result<PointSet> {
    let per_slice: Vec<(Vec<f64>, Vec<bool>)> = slices
        .par_iter()
        .map(|s| {
            let ex = FeatureExtractor::new(s.image, cfg.patch_size)?;
            let grid = StrideGrid::new(s.image.nx(), s.image.ny(), cfg.stride);
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (x, y) in grid.points() {
                rows.extend(ex.extract(x, y).values);
                labels.push(s.mask.get(x, y) != 0);
            }
            Ok((rows, labels))
        })
        .collect::<Result<_>>()?;
    let mut set = PointSet {
        rows: Vec::new(),
        labels: Vec::new(),
        width: BASE_FEATURES,
    };
    for (r, l) in per_slice {
        set.rows.extend(r);
        set.labels.extend(l);
    }
    Ok(set)
}

fn level2_points(
    slices: &[TrainingSlice<'_>],
    level1: &[&RandomForestModel],
    cfg: &CascadeConfig,
) -> Result<PointSet> {
    let per_slice: Vec<(Vec<f64>, Vec<bool>)> = slices
        .par_iter()
        .zip(level1.par_iter())
        .map(|(s, model)| {
            let (nx, ny) = s.image.dims();
            let ex = FeatureExtractor::new(s.image, cfg.patch_size)?;
            let grid = StrideGrid::new(nx, ny, cfg.stride);
            let (values, dense) = level1_map(model, &ex, &grid, nx, ny)?;
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for ((x, y), &p1) in grid.points().zip(&values) {
                if p1 >= cfg.gate {
                    rows.extend(ex.extract_with_context(x, y, &dense).values);
                    labels.push(s.mask.get(x, y) != 0);
                }
            }
            Ok((rows, labels))
        })
        .collect::<Result<_>>()?;
    let mut set = PointSet {
        rows: Vec::new(),
        labels: Vec::new(),
        width: CASCADE_FEATURES,
    };
    for (r, l) in per_slice {
        set.rows.extend(r);
        set.labels.extend(l);
    }
    Ok(set)
}

/// Train both levels. Level-two inputs come from level-one models fitted on
/// the other half of the cases (split by case parity) so level two sees
/// out-of-sample level-one responses; the returned level one is refit on all
/// cases.
pub fn train_cascade(
    slices: &[TrainingSlice<'_>],
    cfg: &CascadeConfig,
) -> Result<(Cascade, CascadeReport)> {
    cfg.validate()?;
    ensure!(!slices.is_empty(), Error::InvalidArgument("no training slices".into()));
    let seed_value = cfg.forest.seed;
    let all = balance(
        level1_points(slices, cfg)?,
        cfg.negative_ratio,
        cfg.max_samples,
        seed_value,
    )?;
    let (level1, report1) = train_level(&all, &cfg.forest)?;

    let mut cases: Vec<usize> = slices.iter().map(|s| s.case).collect();
    cases.sort_unstable();
    cases.dedup();
    let fold_of = |case: usize| cases.binary_search(&case).unwrap() % 2;
    let mut fold_models: Vec<Option<RandomForestModel>> = vec![None, None];
    if cases.len() >= 2 {
        for (fold, slot) in fold_models.iter_mut().enumerate() {
            let train: Vec<TrainingSlice<'_>> = slices
                .iter()
                .filter(|s| fold_of(s.case) != fold)
                .map(|s| TrainingSlice {
                    case: s.case,
                    image: s.image,
                    mask: s.mask,
                })
                .collect();
            let set = level1_points(&train, cfg)
                .and_then(|p| balance(p, cfg.negative_ratio, cfg.max_samples, seed_value ^ (fold as u64 + 1)));
            // A fold without positives falls back to the full model.
            if let Ok(set) = set {
                let forest = ForestConfig {
                    seed: seed::derive_seed(seed_value, &[fold as u64 + 1]),
                    ..cfg.forest.clone()
                };
                *slot = Some(train_level(&set, &forest)?.0);
            }
        }
    }
    let per_slice: Vec<&RandomForestModel> = slices
        .iter()
        .map(|s| fold_models[fold_of(s.case)].as_ref().unwrap_or(&level1))
        .collect();
    let level2_set = balance(
        level2_points(slices, &per_slice, cfg)?,
        cfg.negative_ratio,
        cfg.max_samples,
        seed_value ^ 0x4c32,
    )?;
    let forest2 = ForestConfig {
        seed: seed::derive_seed(seed_value, &[2]),
        ..cfg.forest.clone()
    };
    let (level2, report2) = train_level(&level2_set, &forest2)?;
    Ok((
        Cascade { level1, level2 },
        CascadeReport {
            level1: report1,
            level2: report2,
        },
    ))
}

/// Superpixels in which strictly more than half of the pixels have
/// `p_RF > 0.5`, in ascending id order.
pub fn retain_superpixels(spmap: &SuperpixelMap, rmap: &ResponseMap) -> Result<Vec<usize>> {
    ensure!(
        spmap.labels().same_dims(rmap.image()),
        Error::DimensionMismatch(format!(
            "superpixels {:?} vs response map {:?}",
            spmap.dims(),
            rmap.image().dims()
        ))
    );
    let mut high = vec![0usize; spmap.count()];
    for (&l, &p) in spmap.labels().data().iter().zip(rmap.image().data()) {
        if p > 0.5 {
            high[l as usize] += 1;
        }
    }
    Ok(high
        .iter()
        .zip(spmap.stats())
        .enumerate()
        .filter(|(_, (&h, st))| 2 * h > st.pixel_count)
        .map(|(i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rf::forest::{Node, Tree};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn constant_forest(feature_count: usize, value: f64) -> RandomForestModel {
        RandomForestModel {
            feature_version: FEATURE_VERSION,
            feature_count,
            seed: 0,
            max_depth: 0,
            trees: vec![Tree {
                nodes: vec![Node {
                    feature: -1,
                    threshold: 0.0,
                    left: 0,
                    right: 0,
                    value,
                }],
            }],
        }
    }

    /// Level one = center intensity, so outputs vary over the slice.
    fn intensity_forest() -> RandomForestModel {
        let mut nodes = vec![Node {
            feature: 15,
            threshold: 0.5,
            left: 1,
            right: 2,
            value: 0.0,
        }];
        for v in [0.1, 0.9] {
            nodes.push(Node {
                feature: -1,
                threshold: 0.0,
                left: 0,
                right: 0,
                value: v,
            });
        }
        RandomForestModel {
            feature_version: FEATURE_VERSION,
            feature_count: BASE_FEATURES,
            seed: 0,
            max_depth: 1,
            trees: vec![Tree { nodes }],
        }
    }

    fn blocks(nx: usize, ny: usize, b: usize) -> SuperpixelMap {
        let per_row = nx.div_ceil(b);
        SuperpixelMap::from_labels(Grid2::from_fn(nx, ny, |x, y| ((y / b) * per_row + x / b) as u32))
            .unwrap()
    }

    #[test]
    fn zero_level_one_never_runs_level_two() {
        let img = Image::filled(20, 20, 0.5);
        let out = cascade_apply(
            &constant_forest(BASE_FEATURES, 0.0),
            &constant_forest(CASCADE_FEATURES, 1.0),
            &img,
            &CascadeConfig::default(),
        )
        .unwrap();
        assert_eq!(out.level2_evaluations, 0);
        assert!(out.response.image().data().iter().all(|&v| (v as f64) < 0.2));
    }

    #[test]
    fn zero_gate_runs_level_two_everywhere() {
        let img = Image::filled(21, 13, 0.5);
        let cfg = CascadeConfig {
            gate: 0.0,
            stride: 4,
            ..Default::default()
        };
        let out = cascade_apply(
            &constant_forest(BASE_FEATURES, 0.0),
            &constant_forest(CASCADE_FEATURES, 0.7),
            &img,
            &cfg,
        )
        .unwrap();
        // x: 0,4,...,20 (6); y: 0,4,8,12 (4)
        assert_eq!(out.level2_evaluations, 24);
        assert!(out.response.image().data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn version_mismatch_is_an_error() {
        let img = Image::filled(10, 10, 0.5);
        let mut l2 = constant_forest(CASCADE_FEATURES, 0.5);
        l2.feature_version = 99;
        let err = cascade_apply(&constant_forest(BASE_FEATURES, 0.5), &l2, &img, &CascadeConfig::default());
        assert!(matches!(err, Err(Error::Model(_))));
    }

    #[test]
    fn retention_rule() {
        let sp = blocks(4, 2, 2);
        let mk = |vals: Vec<f32>| ResponseMap::new(Image::from_vec(4, 2, vals).unwrap()).unwrap();
        assert_eq!(retain_superpixels(&sp, &mk(vec![0.6; 8])).unwrap(), vec![0, 1]);
        assert!(retain_superpixels(&sp, &mk(vec![0.4; 8])).unwrap().is_empty());
        // Superpixel 0 is half 0.9 and half 0.1.
        let tie = mk(vec![0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.9, 0.9]);
        assert_eq!(retain_superpixels(&sp, &tie).unwrap(), vec![1]);
        let other = ResponseMap::new(Image::filled(3, 2, 0.0)).unwrap();
        assert!(retain_superpixels(&sp, &other).is_err());
    }

    #[test]
    fn interpolation_reproduces_grid_nodes() {
        let grid = StrideGrid::new(9, 5, 4);
        assert_eq!(grid.xs, vec![0, 4, 8]);
        assert_eq!(grid.ys, vec![0, 4]);
        let vals = vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.0];
        let img = grid.interpolate(&vals, 9, 5);
        assert_eq!(img.get(4, 0), 0.5);
        assert_eq!(img.get(8, 4), 0.0);
        assert_eq!(img.get(2, 0), 0.25);
        assert_eq!(img.get(0, 2), 0.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn cascade_output_in_unit_interval(seed in any::<u64>(), gate in 0.0f64..1.0, pass in 0.0f64..1.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = Image::from_fn(23, 17, |_, _| rng.random::<f32>());
            let cfg = CascadeConfig { gate, pass_through: pass, patch_size: 5, stride: 3, ..Default::default() };
            let l2 = constant_forest(CASCADE_FEATURES, rng.random());
            let out = cascade_apply(&intensity_forest(), &l2, &img, &cfg).unwrap();
            prop_assert!(out.response.image().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn retention_is_monotone(seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let sp = blocks(12, 9, 3);
            let base = Image::from_fn(12, 9, |_, _| rng.random::<f32>());
            let mut raised = base.clone();
            for v in raised.data_mut() {
                if rng.random_bool(0.3) {
                    *v = (*v + rng.random::<f32>()).min(1.0);
                }
            }
            let before = retain_superpixels(&sp, &ResponseMap::new(base).unwrap()).unwrap();
            let after = retain_superpixels(&sp, &ResponseMap::new(raised).unwrap()).unwrap();
            prop_assert!(before.iter().all(|id| after.contains(id)));
        }
    }
}
