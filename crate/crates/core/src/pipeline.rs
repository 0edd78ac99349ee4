//! End-to-end stages over a run directory.
//!
//! Each stage reads its inputs, computes everything in memory and only then
//! writes its artifacts plus a `manifest.txt` holding a hash of the settings
//! it depends on (chained through its upstream stages). A stage refuses to
//! run when an upstream manifest is missing or was produced under different
//! settings.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{case_name, hex, KeyValues, PipelineConfig};
use crate::convnet::{mean_probability, predict_patches, train_sgd, write_trace, EpochStats, NetworkParams};
use crate::error::{ensure, Error, Result};
use crate::evaluation::{dice, emit_report, mean_curve, summarize, sweep_thresholds, DiceReport, Stage, SweepCurve};
use crate::image::{Grid2, Image};
use crate::inference::{gaussian_smooth_3d, project_to_pixels, threshold_map, ProbabilityMap};
use crate::rf::{train_cascade, Cascade, CascadeConfig, CascadeReport, ForestConfig, RandomForestModel, TrainingSlice};
use crate::seed;
use crate::superpixel::{
    dice_optimal_selection, foreground_counts, optimal_labeling, slic_2d, stack_labels, unstack_labels, SuperpixelMap,
};
use crate::tps::{augment_training_set, default_scales, sample_patch, AugmentConfig, AugmentSource, PatchDataset};
use crate::volume::{
    load_grid, load_labels, load_mask, load_volume, make_phantom, save_grid, save_labels, save_mask, save_volume,
    window_hu, Grid3, LabelMask, PhantomConfig, Volume,
};

const TAG_PHANTOM: u64 = 1;
const TAG_RF: u64 = 2;
const TAG_AUGMENT: u64 = 3;
const TAG_TRAIN: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageId {
    Data,
    Superpixels,
    RfTrain,
    RfApply,
    Augment,
    Train,
    Infer,
    Eval,
}

impl StageId {
    pub fn dir_name(self) -> &'static str {
        match self {
            StageId::Data => "data",
            StageId::Superpixels => "superpixels",
            StageId::RfTrain => "rf_model",
            StageId::RfApply => "rf",
            StageId::Augment => "augment",
            StageId::Train => "net",
            StageId::Infer => "infer",
            StageId::Eval => "eval",
        }
    }

    /// Subcommand that produces the stage.
    pub fn command(self) -> &'static str {
        match self {
            StageId::Data => "phantom",
            StageId::Superpixels => "superpixels",
            StageId::RfTrain => "rf-train",
            StageId::RfApply => "rf-apply",
            StageId::Augment => "augment",
            StageId::Train => "train",
            StageId::Infer => "infer",
            StageId::Eval => "eval",
        }
    }

    fn upstream(self) -> &'static [StageId] {
        match self {
            StageId::Data => &[],
            StageId::Superpixels | StageId::RfTrain => &[StageId::Data],
            StageId::RfApply => &[StageId::RfTrain, StageId::Superpixels],
            StageId::Augment => &[StageId::RfApply],
            StageId::Train => &[StageId::Augment],
            StageId::Infer => &[StageId::Train, StageId::RfApply],
            StageId::Eval => &[StageId::Infer],
        }
    }

    fn sections(self) -> &'static [&'static str] {
        match self {
            StageId::Data => &["seed", "phantom"],
            StageId::Superpixels => &["slic", "window"],
            StageId::RfTrain => &["seed", "cascade", "window", "cases"],
            StageId::RfApply => &[],
            StageId::Augment => &["seed", "augment", "network"],
            StageId::Train => &["seed", "network", "train"],
            StageId::Infer => &["infer", "smooth"],
            StageId::Eval => &["eval"],
        }
    }
}

/// Per-case Dice at every evaluated stage plus the sweep curves.
#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub reports: Vec<DiceReport>,
    /// Mean Dice over test cases per variant and threshold.
    pub curves: Vec<SweepCurve>,
    /// (variant, swept-optimal threshold, mean Dice there, mean Dice at
    /// the configured operating threshold).
    pub operating_points: Vec<(String, f64, f64, f64)>,
}

impl EvalSummary {
    pub fn report(&self, stage: Stage, scales: Option<usize>) -> Option<&DiceReport> {
        self.reports.iter().find(|r| r.stage == stage && r.scales == scales)
    }
}

/// A run directory plus the effective configuration.
pub struct Run {
    dir: PathBuf,
    cfg: PipelineConfig,
    kv: KeyValues,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

/// Intensities mapped to [0, 1] through the configured window.
fn normalized(v: &Volume, window: (f64, f64)) -> Result<Volume> {
    match v.kind() {
        crate::volume::IntensityKind::Normalized => Ok(v.clone()),
        crate::volume::IntensityKind::Hounsfield => window_hu(v, window.0, window.1),
    }
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>, kv: KeyValues) -> Result<Self> {
        let cfg = PipelineConfig::from_kv(&kv)?;
        // Store the fully expanded form so hashes do not depend on which
        // defaults were spelled out.
        let kv = cfg.to_kv();
        Ok(Self {
            dir: dir.into(),
            cfg,
            kv,
        })
    }

    pub fn from_config(dir: impl Into<PathBuf>, cfg: &PipelineConfig) -> Result<Self> {
        Self::new(dir, cfg.to_kv())
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn stage_dir(&self, stage: StageId) -> PathBuf {
        match stage {
            StageId::Data => {
                let p = Path::new(&self.cfg.data_dir);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    self.dir.join(p)
                }
            }
            s => self.dir.join(s.dir_name()),
        }
    }

    /// Settings hash of a stage, chained through its upstream stages.
    pub fn stage_hash(&self, stage: StageId) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(stage.dir_name());
        h.update(self.kv.hash_sections(stage.sections()));
        for &up in stage.upstream() {
            h.update(self.stage_hash(up));
        }
        hex(&h.finalize())
    }

    fn manifest_path(&self, stage: StageId) -> PathBuf {
        self.stage_dir(stage).join("manifest.txt")
    }

    fn write_manifest(&self, stage: StageId) -> Result<()> {
        write_text(
            &self.manifest_path(stage),
            &format!("stage={}\nhash={}\n", stage.command(), self.stage_hash(stage)),
        )
    }

    /// Fails unless `stage` was produced under the current settings. Case
    /// directories without a manifest are treated as external data.
    pub fn check_stage(&self, stage: StageId) -> Result<()> {
        let path = self.manifest_path(stage);
        if stage == StageId::Data && !path.exists() && self.stage_dir(stage).is_dir() {
            return Ok(());
        }
        let stale = || {
            Error::Data(format!(
                "{} is missing or was produced with different settings; run `spseg {}` first",
                self.stage_dir(stage).display(),
                stage.command()
            ))
        };
        let text = fs::read_to_string(&path).map_err(|_| stale())?;
        let kv = KeyValues::parse(&text).map_err(|_| stale())?;
        ensure!(kv.get("hash") == Some(self.stage_hash(stage).as_str()), stale());
        Ok(())
    }

    fn check_upstream(&self, stage: StageId) -> Result<()> {
        for &up in stage.upstream() {
            self.check_stage(up)?;
        }
        Ok(())
    }

    fn sub_seed(&self, tag: u64) -> u64 {
        seed::derive_seed(self.cfg.seed, &[tag])
    }

    fn case_paths(&self, case: &str) -> (PathBuf, PathBuf) {
        let d = self.stage_dir(StageId::Data);
        (d.join(format!("{case}.mhd")), d.join(format!("{case}_mask.mhd")))
    }

    /// Normalized volume and ground truth for a case.
    pub fn load_case(&self, case: &str) -> Result<(Volume, LabelMask)> {
        let (vp, mp) = self.case_paths(case);
        let v = normalized(&load_volume(&vp)?, self.cfg.window)?;
        let m = load_mask(&mp)?;
        ensure!(
            v.dims() == m.dims(),
            Error::DimensionMismatch(format!("{case}: volume {:?} vs mask {:?}", v.dims(), m.dims()))
        );
        Ok((v, m))
    }

    pub fn load_superpixels(&self, case: &str) -> Result<Vec<SuperpixelMap>> {
        unstack_labels(&load_labels(&self.stage_dir(StageId::Superpixels).join(format!("{case}.mhd")))?)
    }

    pub fn load_retained(&self, case: &str, slices: usize) -> Result<Vec<Vec<usize>>> {
        let path = self.stage_dir(StageId::RfApply).join(format!("{case}_retained.csv"));
        let mut r = csv::Reader::from_path(&path).map_err(csv_error(&path))?;
        let mut out = vec![Vec::new(); slices];
        for rec in r.records() {
            let rec = rec.map_err(csv_error(&path))?;
            let parse = |i: usize| -> Result<usize> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Data(format!("{}: malformed row", path.display())))
            };
            let (z, id) = (parse(0)?, parse(1)?);
            ensure!(z < slices, Error::Data(format!("{}: slice {z} out of range", path.display())));
            out[z].push(id);
        }
        Ok(out)
    }

    pub fn load_cascade(&self) -> Result<Cascade> {
        let d = self.stage_dir(StageId::RfTrain);
        Ok(Cascade {
            level1: RandomForestModel::load(&d.join("level1.rf"))?,
            level2: RandomForestModel::load(&d.join("level2.rf"))?,
        })
    }

    pub fn load_network(&self) -> Result<NetworkParams> {
        let (spec, params) = NetworkParams::load(&self.stage_dir(StageId::Train).join("params.cnn"))?;
        ensure!(
            spec == self.cfg.network,
            Error::Model("stored network does not match network.layers".into())
        );
        Ok(params)
    }

    fn write_config_copy(&self) -> Result<()> {
        create_dir(&self.dir)?;
        write_text(&self.dir.join("config.txt"), &self.kv.render())
    }

    /// Generate `phantom.count` phantom cases.
    pub fn phantom(&self) -> Result<()> {
        let n = self.cfg.phantom_count;
        ensure!(n > 0, Error::InvalidArgument("phantom count must be positive".into()));
        let cases: Vec<(Volume, LabelMask)> = (0..n)
            .into_par_iter()
            .map(|i| {
                make_phantom(&PhantomConfig {
                    seed: seed::derive_seed(self.sub_seed(TAG_PHANTOM), &[i as u64]),
                    ..self.cfg.phantom.clone()
                })
            })
            .collect::<Result<_>>()?;
        self.write_config_copy()?;
        create_dir(&self.stage_dir(StageId::Data))?;
        for (i, (v, m)) in cases.iter().enumerate() {
            let (vp, mp) = self.case_paths(&case_name(i));
            save_volume(v, &vp)?;
            save_mask(m, &mp)?;
        }
        self.write_manifest(StageId::Data)
    }

    /// SLIC superpixels for every slice of every case.
    pub fn superpixels(&self) -> Result<()> {
        self.check_upstream(StageId::Superpixels)?;
        let cases = self.cfg.all_cases();
        let maps: Vec<Grid3<i32>> = cases
            .iter()
            .map(|c| {
                let (v, _) = self.load_case(c)?;
                let slices: Vec<SuperpixelMap> = v
                    .slices()
                    .par_iter()
                    .map(|s| slic_2d(s, &self.cfg.slic))
                    .collect::<Result<_>>()?;
                stack_labels(&slices, v.spacing())
            })
            .collect::<Result<_>>()?;
        self.write_config_copy()?;
        let d = self.stage_dir(StageId::Superpixels);
        create_dir(&d)?;
        for (c, m) in cases.iter().zip(&maps) {
            save_labels(m, &d.join(format!("{c}.mhd")))?;
        }
        self.write_manifest(StageId::Superpixels)
    }

    fn cascade_config(&self) -> CascadeConfig {
        CascadeConfig {
            forest: ForestConfig {
                seed: self.sub_seed(TAG_RF),
                ..self.cfg.cascade.forest.clone()
            },
            ..self.cfg.cascade.clone()
        }
    }

    /// Train the two-level cascade on the training cases.
    pub fn rf_train(&self) -> Result<CascadeReport> {
        self.check_upstream(StageId::RfTrain)?;
        let data: Vec<(Vec<Image>, Vec<Grid2<u8>>)> = self
            .cfg
            .train_cases
            .iter()
            .map(|c| {
                let (v, m) = self.load_case(c)?;
                Ok((v.slices(), m.slices()))
            })
            .collect::<Result<_>>()?;
        let slices: Vec<TrainingSlice<'_>> = data
            .iter()
            .enumerate()
            .flat_map(|(case, (imgs, masks))| {
                imgs.iter()
                    .zip(masks)
                    .map(move |(image, mask)| TrainingSlice { case, image, mask })
            })
            .collect();
        let (cascade, report) = train_cascade(&slices, &self.cascade_config())?;
        self.write_config_copy()?;
        let d = self.stage_dir(StageId::RfTrain);
        create_dir(&d)?;
        cascade.level1.save(&d.join("level1.rf"))?;
        cascade.level2.save(&d.join("level2.rf"))?;
        self.write_manifest(StageId::RfTrain)?;
        Ok(report)
    }

    /// Response maps and retained superpixels for every case.
    pub fn rf_apply(&self) -> Result<()> {
        self.check_upstream(StageId::RfApply)?;
        let cascade = self.load_cascade()?;
        let cfg = self.cascade_config();
        let cases = self.cfg.all_cases();
        let results: Vec<(Grid3<f32>, Vec<Vec<usize>>)> = cases
            .iter()
            .map(|c| {
                let (v, _) = self.load_case(c)?;
                let sps = self.load_superpixels(c)?;
                ensure!(
                    sps.len() == v.dims()[2],
                    Error::DimensionMismatch(format!("{c}: superpixel slices do not match volume"))
                );
                let per_slice: Vec<(Image, Vec<usize>)> = v
                    .slices()
                    .par_iter()
                    .zip(&sps)
                    .map(|(s, sp)| {
                        let out = cascade.apply(s, &cfg)?;
                        let kept = crate::rf::retain_superpixels(sp, &out.response)?;
                        Ok((out.response.into_image(), kept))
                    })
                    .collect::<Result<_>>()?;
                let (maps, kept): (Vec<Image>, Vec<Vec<usize>>) = per_slice.into_iter().unzip();
                Ok((Grid3::from_slices(&maps, v.spacing())?, kept))
            })
            .collect::<Result<_>>()?;
        self.write_config_copy()?;
        let d = self.stage_dir(StageId::RfApply);
        create_dir(&d)?;
        for (c, (map, kept)) in cases.iter().zip(&results) {
            save_grid(map, &d.join(format!("{c}_response.mhd")), &[("Content", "rf_response")])?;
            let path = d.join(format!("{c}_retained.csv"));
            let mut w = csv::Writer::from_path(&path).map_err(csv_error(&path))?;
            w.write_record(["slice", "superpixel"]).map_err(csv_error(&path))?;
            for (z, ids) in kept.iter().enumerate() {
                for id in ids {
                    w.write_record([z.to_string(), id.to_string()]).map_err(csv_error(&path))?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        self.write_manifest(StageId::RfApply)
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            scales: default_scales(self.cfg.train_scales),
            deformations: self.cfg.deformations,
            grid: self.cfg.tps_grid,
            max_displacement: self.cfg.max_displacement,
            patch_size: self.cfg.network.input().1,
            seed: self.sub_seed(TAG_AUGMENT),
        }
    }

    fn patch_set(&self, cases: &[String], cfg: &AugmentConfig) -> Result<PatchDataset> {
        struct Loaded {
            slices: Vec<Image>,
            sps: Vec<SuperpixelMap>,
            retained: Vec<Vec<usize>>,
            labels: Vec<Vec<bool>>,
        }
        let loaded: Vec<Loaded> = cases
            .iter()
            .map(|c| {
                let (v, m) = self.load_case(c)?;
                let sps = self.load_superpixels(c)?;
                let retained = self.load_retained(c, sps.len())?;
                let labels = sps
                    .iter()
                    .zip(m.slices())
                    .map(|(sp, gt)| optimal_labeling(sp, &gt))
                    .collect::<Result<_>>()?;
                Ok(Loaded {
                    slices: v.slices(),
                    sps,
                    retained,
                    labels,
                })
            })
            .collect::<Result<_>>()?;
        let sources: Vec<AugmentSource<'_>> = loaded
            .iter()
            .enumerate()
            .flat_map(|(ci, l)| {
                (0..l.slices.len())
                    .filter(|&z| !l.retained[z].is_empty())
                    .map(move |z| AugmentSource {
                        volume: ci as u32,
                        slice: z as u32,
                        image: &l.slices[z],
                        spmap: &l.sps[z],
                        retained: &l.retained[z],
                        labels: &l.labels[z],
                    })
            })
            .collect();
        augment_training_set(&sources, cfg)
    }

    /// Augmented patch sets for training (and validation, if configured).
    pub fn augment(&self) -> Result<(PatchDataset, Option<PatchDataset>)> {
        self.check_upstream(StageId::Augment)?;
        let cfg = self.augment_config();
        let train = self.patch_set(&self.cfg.train_cases, &cfg)?;
        let validation = if self.cfg.validation_cases.is_empty() {
            None
        } else {
            let plain = AugmentConfig {
                deformations: 0,
                ..cfg.clone()
            };
            Some(self.patch_set(&self.cfg.validation_cases, &plain)?)
        };
        self.write_config_copy()?;
        let d = self.stage_dir(StageId::Augment);
        create_dir(&d)?;
        train.save(&d.join("train.ds"))?;
        let vpath = d.join("validation.ds");
        match &validation {
            Some(v) => v.save(&vpath)?,
            None if vpath.exists() => fs::remove_file(&vpath).map_err(|e| Error::io(&vpath, e))?,
            None => {}
        }
        self.write_manifest(StageId::Augment)?;
        Ok((train, validation))
    }

    /// Train the patch classifier.
    pub fn train(&self) -> Result<Vec<EpochStats>> {
        self.check_upstream(StageId::Train)?;
        let d = self.stage_dir(StageId::Augment);
        let train = PatchDataset::load(&d.join("train.ds"))?;
        let vpath = d.join("validation.ds");
        let validation = if vpath.exists() {
            Some(PatchDataset::load(&vpath)?)
        } else {
            None
        };
        let tcfg = crate::convnet::TrainConfig {
            seed: self.sub_seed(TAG_TRAIN),
            ..self.cfg.train.clone()
        };
        let (params, trace) = train_sgd(&self.cfg.network, &train, validation.as_ref(), &tcfg)?;
        self.write_config_copy()?;
        let out = self.stage_dir(StageId::Train);
        create_dir(&out)?;
        params.save(&self.cfg.network, &out.join("params.cnn"))?;
        write_trace(&trace, &out.join("trace.csv"))?;
        self.write_manifest(StageId::Train)?;
        Ok(trace)
    }

    /// P(x) for one case at `n_scales` test scales.
    pub fn probability_map(
        &self,
        params: &NetworkParams,
        volume: &Volume,
        sps: &[SuperpixelMap],
        retained: &[Vec<usize>],
        n_scales: usize,
    ) -> Result<ProbabilityMap> {
        let scales = default_scales(n_scales);
        let size = self.cfg.network.input().1;
        let slices = volume.slices();
        let jobs: Vec<(usize, usize)> = retained
            .iter()
            .enumerate()
            .flat_map(|(z, ids)| ids.iter().map(move |&id| (z, id)))
            .collect();
        let patches: Vec<Image> = jobs
            .par_iter()
            .map(|&(z, id)| {
                scales
                    .iter()
                    .map(|&s| sample_patch(&slices[z], &sps[z], id, s, None, size))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let probs = predict_patches(&self.cfg.network, params, &patches)?;
        let mut per_slice = vec![Vec::new(); retained.len()];
        for (&(z, id), p) in jobs.iter().zip(probs.chunks(scales.len())) {
            per_slice[z].push((id, mean_probability(p)?));
        }
        project_to_pixels(sps, retained, &per_slice, volume.spacing())
    }

    /// P(x), G(P(x)) and the final mask for each test case and test-scale
    /// setting.
    pub fn infer(&self) -> Result<()> {
        self.check_upstream(StageId::Infer)?;
        ensure!(!self.cfg.test_cases.is_empty(), Error::InvalidArgument("cases.test is empty".into()));
        let params = self.load_network()?;
        let mut outputs = Vec::new();
        for c in &self.cfg.test_cases {
            let (v, _) = self.load_case(c)?;
            let sps = self.load_superpixels(c)?;
            let retained = self.load_retained(c, sps.len())?;
            for &n in &self.cfg.infer_scales {
                let p = self.probability_map(&params, &v, &sps, &retained, n)?;
                let g = gaussian_smooth_3d(&p, &self.cfg.smooth)?;
                let mask = threshold_map(if self.cfg.apply_smoothing { &g } else { &p }, self.cfg.threshold)?;
                outputs.push((c.clone(), n, p, g, mask));
            }
        }
        self.write_config_copy()?;
        let d = self.stage_dir(StageId::Infer);
        create_dir(&d)?;
        for (c, n, p, g, mask) in &outputs {
            p.save(&d.join(format!("{c}_P_ns{n}.mhd")))?;
            g.save(&d.join(format!("{c}_G_ns{n}.mhd")))?;
            save_mask(mask, &d.join(format!("{c}_mask_ns{n}.mhd")))?;
        }
        self.write_manifest(StageId::Infer)
    }

    /// Compute reports and sweeps over the test cases without writing.
    pub fn evaluate(&self) -> Result<EvalSummary> {
        self.check_upstream(StageId::Eval)?;
        ensure!(!self.cfg.test_cases.is_empty(), Error::InvalidArgument("cases.test is empty".into()));
        let d = self.stage_dir(StageId::Infer);
        let th = &self.cfg.thresholds;
        let mut optimal = Vec::new();
        let mut input_rf = Vec::new();
        // variant label -> per-case curves
        let mut curves: Vec<(Stage, usize, Vec<SweepCurve>)> = Vec::new();
        for &n in &self.cfg.infer_scales {
            curves.push((Stage::Unsmoothed, n, Vec::new()));
            curves.push((Stage::Smoothed, n, Vec::new()));
        }
        for c in &self.cfg.test_cases {
            let (_, gt) = self.load_case(c)?;
            let sps = self.load_superpixels(c)?;
            let retained = self.load_retained(c, sps.len())?;
            let gts = gt.slices();
            let counts: Vec<Vec<(usize, usize)>> = sps
                .iter()
                .zip(&gts)
                .map(|(sp, g)| foreground_counts(sp, g))
                .collect::<Result<_>>()?;
            let pooled: Vec<(usize, usize)> = counts.iter().flatten().copied().collect();
            let (best, _) = dice_optimal_selection(&pooled);
            let mut offset = 0;
            let mut opt_slices = Vec::with_capacity(sps.len());
            let mut rf_slices = Vec::with_capacity(sps.len());
            for (sp, kept) in sps.iter().zip(&retained) {
                opt_slices.push(sp.fill(&best[offset..offset + sp.count()])?);
                offset += sp.count();
                let mut sel = vec![false; sp.count()];
                for &id in kept {
                    sp.stat(id)?;
                    sel[id] = true;
                }
                rf_slices.push(sp.fill(&sel)?);
            }
            let spacing = gt.grid().spacing();
            optimal.push((c.clone(), dice(&LabelMask::from_slices(&opt_slices, spacing)?, &gt)?));
            input_rf.push((c.clone(), dice(&LabelMask::from_slices(&rf_slices, spacing)?, &gt)?));
            for (stage, n, list) in curves.iter_mut() {
                let tag = if *stage == Stage::Unsmoothed { "P" } else { "G" };
                let map = ProbabilityMap::load(&d.join(format!("{c}_{tag}_ns{n}.mhd")))?;
                ensure!(
                    map.dims() == gt.dims(),
                    Error::DimensionMismatch(format!("{c}: probability map does not match case"))
                );
                list.push(sweep_thresholds(c, &map, &gt, th)?);
            }
        }
        let mut reports = vec![
            summarize(Stage::Optimal, None, optimal)?,
            summarize(Stage::InputRf, None, input_rf)?,
        ];
        let mut mean_curves = Vec::new();
        let mut operating_points = Vec::new();
        let op_index = th.iter().position(|&t| t == self.cfg.threshold);
        for (stage, n, list) in &curves {
            let label = format!("{} N_s={n}", stage.as_str());
            let mean = mean_curve(&label, list)?;
            let (t_best, d_best) = mean.argmax();
            let at_op = match op_index {
                Some(i) => mean.dice[i],
                None => f64::NAN,
            };
            let i_best = th.iter().position(|&t| t == t_best).unwrap();
            let per_case = list.iter().map(|c| (c.variant.clone(), c.dice[i_best])).collect();
            reports.push(summarize(*stage, Some(*n), per_case)?);
            operating_points.push((label, t_best, d_best, at_op));
            mean_curves.push(mean);
        }
        Ok(EvalSummary {
            reports,
            curves: mean_curves,
            operating_points,
        })
    }

    /// Write Dice reports and sweep curves for the test cases.
    pub fn eval(&self) -> Result<EvalSummary> {
        let summary = self.evaluate()?;
        self.write_config_copy()?;
        let d = self.stage_dir(StageId::Eval);
        create_dir(&d)?;
        emit_report(&summary.reports, &summary.curves, &d)?;
        self.write_operating_points(&summary, &d.join("thresholds.csv"))?;
        self.write_manifest(StageId::Eval)?;
        Ok(summary)
    }

    /// Only the sweep curves.
    pub fn sweep(&self) -> Result<Vec<SweepCurve>> {
        let summary = self.evaluate()?;
        self.write_config_copy()?;
        let d = self.stage_dir(StageId::Eval);
        create_dir(&d)?;
        let path = d.join("sweep.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_error(&path))?;
        w.write_record(["variant", "threshold", "mean_dice"]).map_err(csv_error(&path))?;
        for c in &summary.curves {
            for (t, v) in c.thresholds.iter().zip(&c.dice) {
                w.write_record([c.variant.clone(), format!("{t:?}"), format!("{v:?}")])
                    .map_err(csv_error(&path))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.write_operating_points(&summary, &d.join("thresholds.csv"))?;
        Ok(summary.curves)
    }

    fn write_operating_points(&self, s: &EvalSummary, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
        w.write_record(["variant", "best_threshold", "mean_dice_at_best", "mean_dice_at_operating_threshold"])
            .map_err(csv_error(path))?;
        for (v, t, d, op) in &s.operating_points {
            let op = if op.is_nan() { String::new() } else { format!("{op:?}") };
            w.write_record([v.clone(), format!("{t:?}"), format!("{d:?}"), op])
                .map_err(csv_error(path))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Every stage in order, phantom generation included.
    pub fn run_all(&self) -> Result<EvalSummary> {
        self.phantom()?;
        self.superpixels()?;
        self.rf_train()?;
        self.rf_apply()?;
        self.augment()?;
        self.train()?;
        self.infer()?;
        self.eval()
    }
}

/// Every regular file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// Reload a stored response stack (one map per slice).
pub fn load_response(path: &Path) -> Result<Grid3<f32>> {
    Ok(load_grid::<f32>(path)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::desk_scale();
        cfg.phantom_count = 3;
        cfg.phantom.dims = [48, 48, 8];
        cfg.train_cases = vec![case_name(0), case_name(1)];
        cfg.test_cases = vec![case_name(2)];
        cfg.cascade.forest.trees = 4;
        cfg.cascade.max_samples = 2000;
        cfg.train.epochs = 1;
        cfg.deformations = 1;
        cfg.infer_scales = vec![1];
        cfg
    }

    #[test]
    fn stages_refuse_stale_or_missing_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::from_config(dir.path(), &tiny_config()).unwrap();
        assert!(run.superpixels().is_err());
        assert!(run.rf_apply().is_err());
        run.phantom().unwrap();
        run.superpixels().unwrap();
        let mut changed = tiny_config();
        changed.slic.region_size = 8;
        let other = Run::from_config(dir.path(), &changed).unwrap();
        assert!(other.check_stage(StageId::Superpixels).is_err());
        assert!(other.check_stage(StageId::Data).is_ok());
        assert!(run.check_stage(StageId::Superpixels).is_ok());
    }

    #[test]
    fn stage_hashes_follow_dependencies() {
        let a = Run::from_config("/tmp/unused", &tiny_config()).unwrap();
        let mut cfg = tiny_config();
        cfg.train.epochs = 2;
        let b = Run::from_config("/tmp/unused", &cfg).unwrap();
        for s in [StageId::Data, StageId::Superpixels, StageId::RfTrain, StageId::RfApply, StageId::Augment] {
            assert_eq!(a.stage_hash(s), b.stage_hash(s));
        }
        for s in [StageId::Train, StageId::Infer, StageId::Eval] {
            assert_ne!(a.stage_hash(s), b.stage_hash(s));
        }
    }
}
