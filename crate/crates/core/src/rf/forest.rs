//! Random forest of binary classification trees: bootstrap bagging, random
//! feature subsets per split, Gini impurity.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::seed;

const MAGIC: &[u8; 8] = b"SPSEGRF\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Features tried per split; `None` means `round(sqrt(feature_count))`.
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 32,
            max_depth: 12,
            min_samples_split: 2,
            features_per_split: None,
            seed: 0,
        }
    }
}

/// Flattened tree node. `feature < 0` marks a leaf.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Node {
    pub feature: i32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    /// Positive-class probability (leaves only).
    pub value: f64,
}

impl Node {
    fn leaf(value: f64) -> Self {
        Self {
            feature: -1,
            threshold: 0.0,
            left: 0,
            right: 0,
            value,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.feature < 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.is_leaf() {
                return n.value;
            }
            i = if x[n.feature as usize] <= n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomForestModel {
    pub feature_version: u32,
    pub feature_count: usize,
    pub seed: u64,
    pub max_depth: usize,
    pub trees: Vec<Tree>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForestReport {
    /// Misclassification rate over samples with at least one out-of-bag tree.
    pub oob_error: Option<f64>,
    pub samples: usize,
}

/// Row-major training matrix.
pub struct Samples<'a> {
    pub features: &'a [f64],
    pub labels: &'a [bool],
    pub feature_count: usize,
}

impl Samples<'_> {
    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_count..(i + 1) * self.feature_count]
    }

    fn value(&self, i: usize, f: usize) -> f64 {
        self.features[i * self.feature_count + f]
    }
}

fn gini(pos: f64, n: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    let p = pos / n;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    data: &'a Samples<'a>,
    cfg: &'a ForestConfig,
    mtry: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn build(&mut self, idx: &mut [usize], depth: usize, rng: &mut impl Rng) -> u32 {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.data.labels[i]).count();
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::leaf(pos as f64 / n as f64));
        if depth >= self.cfg.max_depth
            || n < self.cfg.min_samples_split.max(2)
            || pos == 0
            || pos == n
        {
            return id;
        }

        let mut feats = sample(rng, self.data.feature_count, self.mtry).into_vec();
        feats.sort_unstable();
        let parent = gini(pos as f64, n as f64);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut column: Vec<(f64, bool)> = Vec::with_capacity(n);
        for &f in &feats {
            column.clear();
            column.extend(idx.iter().map(|&i| (self.data.value(i, f), self.data.labels[i])));
            column.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0usize;
            for k in 0..n - 1 {
                left_pos += column[k].1 as usize;
                let (a, b) = (column[k].0, column[k + 1].0);
                if a == b {
                    continue;
                }
                let nl = (k + 1) as f64;
                let nr = (n - k - 1) as f64;
                let impurity = (nl * gini(left_pos as f64, nl)
                    + nr * gini((pos - left_pos) as f64, nr))
                    / n as f64;
                let gain = parent - impurity;
                if gain > 0.0 && best.is_none_or(|(g, _, _)| gain > g) {
                    let mid = 0.5 * (a + b);
                    let threshold = if mid < b { mid } else { a };
                    best = Some((gain, f, threshold));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return id;
        };

        // Partition in place: left block keeps x <= threshold.
        let mut split = 0;
        for k in 0..n {
            if self.data.value(idx[k], feature) <= threshold {
                idx.swap(k, split);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        let left = self.build(l, depth + 1, rng);
        let right = self.build(r, depth + 1, rng);
        self.nodes[id as usize] = Node {
            feature: feature as i32,
            threshold,
            left,
            right,
            value: 0.0,
        };
        id
    }
}

/// Train a forest. Trees are built in parallel from per-tree derived seeds,
/// so the result does not depend on the thread count.
pub fn train_forest(
    data: &Samples<'_>,
    feature_version: u32,
    cfg: &ForestConfig,
) -> Result<(RandomForestModel, ForestReport)> {
    let n = data.labels.len();
    ensure!(n > 0, Error::InvalidArgument("empty training set".into()));
    ensure!(
        data.feature_count > 0 && data.features.len() == n * data.feature_count,
        Error::DimensionMismatch(format!(
            "{} feature values for {n} samples of {} features",
            data.features.len(),
            data.feature_count
        ))
    );
    ensure!(n >= 2, Error::InvalidArgument("need at least 2 samples".into()));
    let pos = data.labels.iter().filter(|&&l| l).count();
    ensure!(
        pos > 0 && pos < n,
        Error::InvalidArgument("training labels contain a single class".into())
    );
    ensure!(
        data.features.iter().all(|v| v.is_finite()),
        Error::Data("non-finite feature value".into())
    );
    ensure!(cfg.trees > 0, Error::InvalidArgument("need at least one tree".into()));
    let mtry = cfg
        .features_per_split
        .unwrap_or_else(|| (data.feature_count as f64).sqrt().round() as usize)
        .clamp(1, data.feature_count);

    let built: Vec<(Tree, Vec<bool>)> = (0..cfg.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::stream(cfg.seed, &[0x5246, t as u64]);
            let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut in_bag = vec![false; n];
            for &i in &idx {
                in_bag[i] = true;
            }
            let mut b = Builder {
                data,
                cfg,
                mtry,
                nodes: Vec::new(),
            };
            b.build(&mut idx, 0, &mut rng);
            (Tree { nodes: b.nodes }, in_bag)
        })
        .collect();

    let mut votes = vec![(0.0f64, 0usize); n];
    for (tree, in_bag) in &built {
        for i in (0..n).filter(|&i| !in_bag[i]) {
            votes[i].0 += tree.predict(data.row(i));
            votes[i].1 += 1;
        }
    }
    let (mut wrong, mut counted) = (0usize, 0usize);
    for (i, &(sum, c)) in votes.iter().enumerate() {
        if c > 0 {
            counted += 1;
            wrong += ((sum / c as f64 > 0.5) != data.labels[i]) as usize;
        }
    }
    let report = ForestReport {
        oob_error: (counted > 0).then(|| wrong as f64 / counted as f64),
        samples: n,
    };
    let model = RandomForestModel {
        feature_version,
        feature_count: data.feature_count,
        seed: cfg.seed,
        max_depth: cfg.max_depth,
        trees: built.into_iter().map(|(t, _)| t).collect(),
    };
    Ok((model, report))
}

impl RandomForestModel {
    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    /// Mean positive-class probability over trees.
    pub fn predict(&self, fv: &[f64]) -> Result<f64> {
        ensure!(
            fv.len() == self.feature_count,
            Error::DimensionMismatch(format!(
                "feature vector of length {} for a model expecting {}",
                fv.len(),
                self.feature_count
            ))
        );
        let sum: f64 = self.trees.iter().map(|t| t.predict(fv)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.trees.is_empty(), Error::Model("forest has no trees".into()));
        for (t, tree) in self.trees.iter().enumerate() {
            ensure!(!tree.nodes.is_empty(), Error::Model(format!("tree {t} is empty")));
            for (i, n) in tree.nodes.iter().enumerate() {
                if n.is_leaf() {
                    ensure!(
                        (0.0..=1.0).contains(&n.value),
                        Error::Model(format!("tree {t} leaf {i} probability {}", n.value))
                    );
                } else {
                    ensure!(
                        (n.feature as usize) < self.feature_count,
                        Error::Model(format!("tree {t} node {i} splits on feature {}", n.feature))
                    );
                    let len = tree.nodes.len() as u32;
                    ensure!(
                        n.left as usize > i && n.right as usize > i && n.left < len && n.right < len,
                        Error::Model(format!("tree {t} node {i} has invalid children"))
                    );
                    ensure!(
                        n.threshold.is_finite(),
                        Error::Model(format!("tree {t} node {i} threshold is not finite"))
                    );
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let w = &mut out;
        w.write_u32::<LE>(FORMAT_VERSION).unwrap();
        w.write_u32::<LE>(self.feature_version).unwrap();
        w.write_u32::<LE>(self.feature_count as u32).unwrap();
        w.write_u64::<LE>(self.seed).unwrap();
        w.write_u32::<LE>(self.max_depth as u32).unwrap();
        w.write_u32::<LE>(self.trees.len() as u32).unwrap();
        for tree in &self.trees {
            w.write_u32::<LE>(tree.nodes.len() as u32).unwrap();
            for n in &tree.nodes {
                w.write_i32::<LE>(n.feature).unwrap();
                w.write_f64::<LE>(n.threshold).unwrap();
                w.write_u32::<LE>(n.left).unwrap();
                w.write_u32::<LE>(n.right).unwrap();
                w.write_f64::<LE>(n.value).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Model(format!("truncated forest file: {e}"));
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        ensure!(&magic == MAGIC, Error::Model("not a forest model file".into()));
        let version = r.read_u32::<LE>().map_err(bad)?;
        ensure!(
            version == FORMAT_VERSION,
            Error::Model(format!("unsupported forest format version {version}"))
        );
        let feature_version = r.read_u32::<LE>().map_err(bad)?;
        let feature_count = r.read_u32::<LE>().map_err(bad)? as usize;
        let seed = r.read_u64::<LE>().map_err(bad)?;
        let max_depth = r.read_u32::<LE>().map_err(bad)? as usize;
        let tree_count = r.read_u32::<LE>().map_err(bad)? as usize;
        let mut trees = Vec::with_capacity(tree_count.min(1 << 16));
        for _ in 0..tree_count {
            let count = r.read_u32::<LE>().map_err(bad)? as usize;
            let mut nodes = Vec::with_capacity(count.min(1 << 20));
            for _ in 0..count {
                nodes.push(Node {
                    feature: r.read_i32::<LE>().map_err(bad)?,
                    threshold: r.read_f64::<LE>().map_err(bad)?,
                    left: r.read_u32::<LE>().map_err(bad)?,
                    right: r.read_u32::<LE>().map_err(bad)?,
                    value: r.read_f64::<LE>().map_err(bad)?,
                });
            }
            trees.push(Tree { nodes });
        }
        ensure!(
            r.position() as usize == bytes.len(),
            Error::Model("trailing bytes after forest".into())
        );
        let model = Self {
            feature_version,
            feature_count,
            seed,
            max_depth,
            trees,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Convenience wrapper taking one vector per sample.
pub fn train_forest_rows(
    rows: &[Vec<f64>],
    labels: &[bool],
    feature_version: u32,
    cfg: &ForestConfig,
) -> Result<(RandomForestModel, ForestReport)> {
    ensure!(
        rows.len() == labels.len(),
        Error::DimensionMismatch(format!("{} rows for {} labels", rows.len(), labels.len()))
    );
    let feature_count = rows.first().map_or(0, |r| r.len());
    ensure!(
        rows.iter().all(|r| r.len() == feature_count),
        Error::DimensionMismatch("ragged feature rows".into())
    );
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    train_forest(
        &Samples {
            features: &flat,
            labels,
            feature_count,
        },
        feature_version,
        cfg,
    )
}
