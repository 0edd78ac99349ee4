//! Flat `key=value` configuration with dotted section prefixes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::convnet::{NetworkSpec, TrainConfig};
use crate::error::{ensure, Error, Result};
use crate::inference::{SmoothConfig, DEFAULT_THRESHOLD};
use crate::rf::{CascadeConfig, ForestConfig};
use crate::superpixel::SlicConfig;
use crate::volume::{PhantomConfig, DEFAULT_HU_WINDOW};

/// Ordered key/value pairs. Later `set` calls override earlier values.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues(BTreeMap<String, String>);

impl KeyValues {
    /// One `key = value` per line; `#` starts a comment; keys repeat at most
    /// once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let k = k.trim();
            ensure!(
                !k.is_empty()
                    && k
                        .chars()
                        .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.'),
                Error::Config(format!("line {}: invalid key `{k}`", n + 1))
            );
            ensure!(
                map.insert(k.to_string(), v.trim().to_string()).is_none(),
                Error::Config(format!("line {}: duplicate key `{k}`", n + 1))
            );
        }
        Ok(Self(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    /// Digest of every entry whose key equals or starts with one of the
    /// given section prefixes (`"slic"` matches `slic.region_size`).
    pub fn hash_sections(&self, sections: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.0 {
            let section = k.split('.').next().unwrap();
            if sections.contains(&section) {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sequence of parsed entries that records which keys were read.
struct Reader<'a> {
    kv: &'a KeyValues,
    used: Vec<&'a str>,
}

impl<'a> Reader<'a> {
    fn raw(&mut self, key: &'a str) -> Option<&'a str> {
        self.used.push(key);
        self.kv.get(key)
    }

    fn value<T: FromStr>(&mut self, key: &'a str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`"))),
        }
    }

    fn list<T: FromStr>(&mut self, key: &'a str, default: Vec<T>) -> Result<Vec<T>> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => parse_list(v).map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`"))),
        }
    }

    fn array<T: FromStr + Copy, const N: usize>(&mut self, key: &'a str, default: [T; N]) -> Result<[T; N]> {
        let v = self.list(key, default.to_vec())?;
        v.try_into()
            .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values")))
    }

    fn finish(self) -> Result<()> {
        let unknown: Vec<&str> = self.kv.keys().filter(|k| !self.used.contains(k)).collect();
        ensure!(
            unknown.is_empty(),
            Error::Config(format!("unknown keys: {}", unknown.join(", ")))
        );
        Ok(())
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, T::Err> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Number of phantom cases; case `i` is named `case{i:02}`.
    pub phantom_count: usize,
    /// Phantom settings; the per-case seed is derived from `seed`.
    pub phantom: PhantomConfig,
    /// Intensity window mapped to [0, 1] before any processing.
    pub window: (f64, f64),
    pub slic: SlicConfig,
    pub cascade: CascadeConfig,
    /// Training scales `N_s` (scale factors from `default_scales`).
    pub train_scales: usize,
    /// Training deformations `N_t`.
    pub deformations: usize,
    pub tps_grid: (usize, usize),
    pub max_displacement: f64,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    /// `N_s` settings evaluated at test time (no deformations).
    pub infer_scales: Vec<usize>,
    pub smooth: SmoothConfig,
    /// Final masks come from the smoothed map when set, else from P(x).
    pub apply_smoothing: bool,
    pub threshold: f64,
    pub thresholds: Vec<f64>,
    pub train_cases: Vec<String>,
    pub validation_cases: Vec<String>,
    pub test_cases: Vec<String>,
    /// Case directory; relative paths resolve against the run directory.
    pub data_dir: String,
}

pub fn case_name(i: usize) -> String {
    format!("case{i:02}")
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom_count: 10,
            phantom: PhantomConfig::default(),
            window: DEFAULT_HU_WINDOW,
            slic: SlicConfig::default(),
            cascade: CascadeConfig::default(),
            train_scales: 2,
            deformations: 8,
            tps_grid: (4, 4),
            max_displacement: 0.25,
            network: NetworkSpec::default_64(),
            train: TrainConfig::default(),
            infer_scales: vec![1, 4],
            smooth: SmoothConfig::default(),
            apply_smoothing: true,
            threshold: DEFAULT_THRESHOLD,
            thresholds: crate::evaluation::default_thresholds(),
            train_cases: (0..8).map(case_name).collect(),
            validation_cases: Vec::new(),
            test_cases: (8..10).map(case_name).collect(),
            data_dir: "data".into(),
        }
    }
}

impl PipelineConfig {
    /// Settings sized for a single CPU core: 32×32 patches on the compact
    /// network, two deformations per patch and a shorter schedule.
    pub fn desk_scale() -> Self {
        let train = TrainConfig {
            epochs: 12,
            batch_size: 32,
            ..TrainConfig::default()
        };
        Self {
            network: NetworkSpec::compact_32(),
            deformations: 2,
            train,
            cascade: CascadeConfig {
                max_samples: 20_000,
                forest: ForestConfig {
                    trees: 24,
                    ..ForestConfig::default()
                },
                ..CascadeConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.slic.validate()?;
        self.cascade.validate()?;
        self.train.validate()?;
        self.smooth.validate()?;
        ensure!(
            self.window.0 < self.window.1,
            Error::Config("window.lo must be below window.hi".into())
        );
        ensure!(
            self.train_scales >= 1 && self.infer_scales.iter().all(|&n| n >= 1) && !self.infer_scales.is_empty(),
            Error::Config("scale counts must be at least 1".into())
        );
        ensure!(
            self.network.input().0 == 1 && self.network.input().1 == self.network.input().2,
            Error::Config("network input must be a single-channel square patch".into())
        );
        ensure!(
            (0.0..=1.0).contains(&self.threshold),
            Error::Config("infer.threshold must lie in [0, 1]".into())
        );
        ensure!(
            !self.thresholds.is_empty()
                && self.thresholds.iter().all(|t| (0.0..=1.0).contains(t))
                && self.thresholds.windows(2).all(|w| w[0] < w[1]),
            Error::Config("eval.thresholds must be strictly ascending within [0, 1]".into())
        );
        ensure!(!self.train_cases.is_empty(), Error::Config("cases.train is empty".into()));
        let mut seen = std::collections::HashSet::new();
        for c in self.train_cases.iter().chain(&self.validation_cases).chain(&self.test_cases) {
            ensure!(
                seen.insert(c.as_str()),
                Error::Config(format!("case `{c}` appears in more than one list"))
            );
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let mut r = Reader { kv, used: Vec::new() };
        let network = match r.raw("network.layers") {
            None | Some("default") => NetworkSpec::default_64(),
            Some("compact") => NetworkSpec::compact_32(),
            Some(text) => {
                let s: NetworkSpec = text.parse()?;
                NetworkSpec::new(s.input(), s.layers().to_vec())?
            }
        };
        let features_per_split = match r.raw("cascade.features_per_split") {
            None | Some("auto") => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|_| Error::Config(format!("cascade.features_per_split: cannot parse `{v}`")))?,
            ),
        };
        let dropout_rate = match r.raw("train.dropout") {
            None | Some("network") => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|_| Error::Config(format!("train.dropout: cannot parse `{v}`")))?,
            ),
        };
        let thresholds = match r.raw("eval.thresholds") {
            None | Some("default") => d.thresholds.clone(),
            Some(v) => parse_list(v).map_err(|_| Error::Config(format!("eval.thresholds: cannot parse `{v}`")))?,
        };
        let seed = r.value("seed", d.seed)?;
        let grid: [usize; 2] = r.array("augment.grid", [d.tps_grid.0, d.tps_grid.1])?;
        let infer_deformations: usize = r.value("infer.deformations", 0)?;
        ensure!(
            infer_deformations == 0,
            Error::Config("infer.deformations must be 0".into())
        );
        let cfg = Self {
            seed,
            phantom_count: r.value("phantom.count", d.phantom_count)?,
            phantom: PhantomConfig {
                dims: r.array("phantom.dims", d.phantom.dims)?,
                spacing: r.array("phantom.spacing", d.phantom.spacing)?,
                seed,
                blob_count: r.value("phantom.blob_count", d.phantom.blob_count)?,
                blob_elongation: r.value("phantom.blob_elongation", d.phantom.blob_elongation)?,
                texture_amplitude: r.value("phantom.texture_amplitude", d.phantom.texture_amplitude)?,
                contrast_gap: r.value("phantom.contrast_gap", d.phantom.contrast_gap)?,
                fat_margin_fraction: r.value("phantom.fat_margin_fraction", d.phantom.fat_margin_fraction)?,
            },
            window: (r.value("window.lo", d.window.0)?, r.value("window.hi", d.window.1)?),
            slic: SlicConfig {
                region_size: r.value("slic.region_size", d.slic.region_size)?,
                compactness: r.value("slic.compactness", d.slic.compactness)?,
                iterations: r.value("slic.iterations", d.slic.iterations)?,
                min_region_fraction: r.value("slic.min_region_fraction", d.slic.min_region_fraction)?,
            },
            cascade: CascadeConfig {
                patch_size: r.value("cascade.patch_size", d.cascade.patch_size)?,
                stride: r.value("cascade.stride", d.cascade.stride)?,
                gate: r.value("cascade.gate", d.cascade.gate)?,
                pass_through: r.value("cascade.pass_through", d.cascade.pass_through)?,
                negative_ratio: r.value("cascade.negative_ratio", d.cascade.negative_ratio)?,
                max_samples: r.value("cascade.max_samples", d.cascade.max_samples)?,
                forest: ForestConfig {
                    trees: r.value("cascade.trees", d.cascade.forest.trees)?,
                    max_depth: r.value("cascade.max_depth", d.cascade.forest.max_depth)?,
                    min_samples_split: r.value("cascade.min_samples_split", d.cascade.forest.min_samples_split)?,
                    features_per_split,
                    seed: 0,
                },
            },
            train_scales: r.value("augment.scales", d.train_scales)?,
            deformations: r.value("augment.deformations", d.deformations)?,
            tps_grid: (grid[0], grid[1]),
            max_displacement: r.value("augment.max_displacement", d.max_displacement)?,
            network,
            train: TrainConfig {
                learning_rate: r.value("train.learning_rate", d.train.learning_rate)?,
                momentum: r.value("train.momentum", d.train.momentum)?,
                weight_decay: r.value("train.weight_decay", d.train.weight_decay)?,
                batch_size: r.value("train.batch_size", d.train.batch_size)?,
                epochs: r.value("train.epochs", d.train.epochs)?,
                dropout_rate,
                seed: 0,
            },
            infer_scales: r.list("infer.scales", d.infer_scales.clone())?,
            smooth: SmoothConfig {
                sigma: r.value("smooth.sigma", d.smooth.sigma)?,
                truncate: r.value("smooth.truncate", d.smooth.truncate)?,
            },
            apply_smoothing: r.value("infer.smooth", d.apply_smoothing)?,
            threshold: r.value("infer.threshold", d.threshold)?,
            thresholds,
            train_cases: r.list("cases.train", d.train_cases.clone())?,
            validation_cases: r.list("cases.validation", d.validation_cases.clone())?,
            test_cases: r.list("cases.test", d.test_cases.clone())?,
            data_dir: r.value("paths.data", d.data_dir.clone())?,
        };
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every setting, including defaults.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("seed", self.seed);
        kv.set("phantom.count", self.phantom_count);
        kv.set("phantom.dims", join(&self.phantom.dims));
        kv.set("phantom.spacing", join(&self.phantom.spacing.map(float)));
        kv.set("phantom.blob_count", self.phantom.blob_count);
        kv.set("phantom.blob_elongation", float(self.phantom.blob_elongation));
        kv.set("phantom.texture_amplitude", float(self.phantom.texture_amplitude));
        kv.set("phantom.contrast_gap", float(self.phantom.contrast_gap));
        kv.set("phantom.fat_margin_fraction", float(self.phantom.fat_margin_fraction));
        kv.set("window.lo", float(self.window.0));
        kv.set("window.hi", float(self.window.1));
        kv.set("slic.region_size", self.slic.region_size);
        kv.set("slic.compactness", float(self.slic.compactness));
        kv.set("slic.iterations", self.slic.iterations);
        kv.set("slic.min_region_fraction", float(self.slic.min_region_fraction));
        let c = &self.cascade;
        kv.set("cascade.patch_size", c.patch_size);
        kv.set("cascade.stride", c.stride);
        kv.set("cascade.gate", float(c.gate));
        kv.set("cascade.pass_through", float(c.pass_through));
        kv.set("cascade.negative_ratio", float(c.negative_ratio));
        kv.set("cascade.max_samples", c.max_samples);
        kv.set("cascade.trees", c.forest.trees);
        kv.set("cascade.max_depth", c.forest.max_depth);
        kv.set("cascade.min_samples_split", c.forest.min_samples_split);
        kv.set(
            "cascade.features_per_split",
            c.forest.features_per_split.map_or("auto".to_string(), |n| n.to_string()),
        );
        kv.set("augment.scales", self.train_scales);
        kv.set("augment.deformations", self.deformations);
        kv.set("augment.grid", format!("{},{}", self.tps_grid.0, self.tps_grid.1));
        kv.set("augment.max_displacement", float(self.max_displacement));
        kv.set("network.layers", self.network.to_string());
        let t = &self.train;
        kv.set("train.learning_rate", float(t.learning_rate));
        kv.set("train.momentum", float(t.momentum));
        kv.set("train.weight_decay", float(t.weight_decay));
        kv.set("train.batch_size", t.batch_size);
        kv.set("train.epochs", t.epochs);
        kv.set("train.dropout", t.dropout_rate.map_or("network".to_string(), float));
        kv.set("infer.scales", join(&self.infer_scales));
        kv.set("infer.deformations", 0);
        kv.set("infer.smooth", self.apply_smoothing);
        kv.set("infer.threshold", float(self.threshold));
        kv.set("smooth.sigma", float(self.smooth.sigma));
        kv.set("smooth.truncate", float(self.smooth.truncate));
        kv.set("eval.thresholds", join(&self.thresholds.iter().map(|&t| float(t)).collect::<Vec<_>>()));
        kv.set("cases.train", join(&self.train_cases));
        kv.set("cases.validation", join(&self.validation_cases));
        kv.set("cases.test", join(&self.test_cases));
        kv.set("paths.data", &self.data_dir);
        kv
    }

    /// Every case in train, validation, test order.
    pub fn all_cases(&self) -> Vec<String> {
        self.train_cases
            .iter()
            .chain(&self.validation_cases)
            .chain(&self.test_cases)
            .cloned()
            .collect()
    }
}
