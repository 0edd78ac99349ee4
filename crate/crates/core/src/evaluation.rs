//! Dice scores, threshold sweeps, summary statistics and CSV reports.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::inference::{threshold_map, ProbabilityMap};
use crate::volume::LabelMask;

/// 2|a∩b| / (|a| + |b|); 1 when both masks are empty.
pub fn dice(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    ensure!(
        a.dims() == b.dims(),
        Error::DimensionMismatch(format!("masks {:?} vs {:?}", a.dims(), b.dims()))
    );
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.voxels().iter().zip(b.voxels()) {
        na += x as usize;
        nb += y as usize;
        inter += (x & y) as usize;
    }
    Ok(dice_from_counts(inter, na, nb))
}

pub fn dice_from_counts(intersection: usize, a: usize, b: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (a + b) as f64
    }
}

/// 0.05, 0.10, …, 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

/// Dice against a reference at each threshold, or mean Dice over cases.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCurve {
    pub variant: String,
    pub thresholds: Vec<f64>,
    pub dice: Vec<f64>,
}

impl SweepCurve {
    /// Threshold with the highest Dice (the lowest one on ties).
    pub fn argmax(&self) -> (f64, f64) {
        let mut best = (self.thresholds[0], self.dice[0]);
        for (&t, &d) in self.thresholds.iter().zip(&self.dice) {
            if d > best.1 {
                best = (t, d);
            }
        }
        best
    }
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    ensure!(
        !thresholds.is_empty()
            && thresholds.iter().all(|t| (0.0..=1.0).contains(t))
            && thresholds.windows(2).all(|w| w[0] < w[1]),
        Error::InvalidArgument("thresholds must be strictly ascending within [0, 1]".into())
    );
    Ok(())
}

pub fn sweep_thresholds(
    variant: &str,
    map: &ProbabilityMap,
    gt: &LabelMask,
    thresholds: &[f64],
) -> Result<SweepCurve> {
    check_thresholds(thresholds)?;
    ensure!(
        map.dims() == gt.dims(),
        Error::DimensionMismatch(format!("map {:?} vs mask {:?}", map.dims(), gt.dims()))
    );
    let dice = thresholds
        .iter()
        .map(|&t| dice(&threshold_map(map, t)?, gt))
        .collect::<Result<_>>()?;
    Ok(SweepCurve {
        variant: variant.to_string(),
        thresholds: thresholds.to_vec(),
        dice,
    })
}

/// Pointwise mean of per-case curves sharing one threshold grid.
pub fn mean_curve(variant: &str, curves: &[SweepCurve]) -> Result<SweepCurve> {
    ensure!(!curves.is_empty(), Error::InvalidArgument("no curves to average".into()));
    let thresholds = curves[0].thresholds.clone();
    ensure!(
        curves.iter().all(|c| c.thresholds == thresholds),
        Error::InvalidArgument("curves use different thresholds".into())
    );
    let n = curves.len() as f64;
    let dice = (0..thresholds.len())
        .map(|i| curves.iter().map(|c| c.dice[i]).sum::<f64>() / n)
        .collect();
    Ok(SweepCurve {
        variant: variant.to_string(),
        thresholds,
        dice,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    /// Best achievable superpixel labeling.
    Optimal,
    /// Union of superpixels retained by the cascade.
    InputRf,
    /// Thresholded per-superpixel probabilities.
    Unsmoothed,
    /// Thresholded smoothed probabilities.
    Smoothed,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Optimal => "optimal",
            Stage::InputRf => "input_S_RF",
            Stage::Unsmoothed => "P(x)",
            Stage::Smoothed => "G(P(x))",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub stage: Stage,
    /// Number of patch scales for probability stages.
    pub scales: Option<usize>,
    /// (case, Dice) in evaluation order.
    pub per_case: Vec<(String, f64)>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl DiceReport {
    /// Column label, e.g. `G(P(x)) N_s=4`.
    pub fn label(&self) -> String {
        match self.scales {
            Some(n) => format!("{} N_s={n}", self.stage.as_str()),
            None => self.stage.as_str().to_string(),
        }
    }
}

impl fmt::Display for DiceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: mean {:.4} std {:.4} min {:.4} max {:.4} ({} cases)",
            self.label(),
            self.mean,
            self.std,
            self.min,
            self.max,
            self.per_case.len()
        )
    }
}

pub fn summarize(stage: Stage, scales: Option<usize>, per_case: Vec<(String, f64)>) -> Result<DiceReport> {
    ensure!(!per_case.is_empty(), Error::InvalidArgument("no cases to summarize".into()));
    ensure!(
        per_case.iter().all(|(_, d)| (0.0..=1.0).contains(d)),
        Error::InvalidArgument("Dice values must lie in [0, 1]".into())
    );
    let n = per_case.len() as f64;
    let mean = per_case.iter().map(|c| c.1).sum::<f64>() / n;
    let var = per_case.iter().map(|c| (c.1 - mean).powi(2)).sum::<f64>() / n;
    let min = per_case.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let max = per_case.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(DiceReport {
        stage,
        scales,
        per_case,
        // Keep min <= mean <= max despite rounding.
        mean: mean.clamp(min, max),
        std: var.sqrt(),
        min,
        max,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Write `per_case.csv` and `aggregate.csv` (one column per report, rows
/// mean / std / min / max), plus `sweep.csv` when curves are given.
pub fn emit_report(reports: &[DiceReport], curves: &[SweepCurve], dir: &Path) -> Result<()> {
    ensure!(!reports.is_empty(), Error::InvalidArgument("no reports to emit".into()));
    let cases: Vec<&str> = reports[0].per_case.iter().map(|c| c.0.as_str()).collect();
    ensure!(
        reports
            .iter()
            .all(|r| r.per_case.iter().map(|c| c.0.as_str()).eq(cases.iter().copied())),
        Error::InvalidArgument("reports cover different cases".into())
    );
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join("per_case.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["case".to_string()];
    header.extend(reports.iter().map(DiceReport::label));
    w.write_record(&header).map_err(csv_err(&path))?;
    for (i, case) in cases.iter().enumerate() {
        let mut row = vec![case.to_string()];
        row.extend(reports.iter().map(|r| num(r.per_case[i].1)));
        w.write_record(&row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("aggregate.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    header[0] = "statistic".to_string();
    w.write_record(&header).map_err(csv_err(&path))?;
    let stats: [(&str, fn(&DiceReport) -> f64); 4] = [
        ("mean", |r| r.mean),
        ("std_population", |r| r.std),
        ("min", |r| r.min),
        ("max", |r| r.max),
    ];
    for (name, get) in stats {
        let mut row = vec![name.to_string()];
        row.extend(reports.iter().map(|r| num(get(r))));
        w.write_record(&row).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    if !curves.is_empty() {
        let path = dir.join("sweep.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record(["variant", "threshold", "mean_dice"])
            .map_err(csv_err(&path))?;
        for c in curves {
            for (t, d) in c.thresholds.iter().zip(&c.dice) {
                w.write_record([c.variant.clone(), num(*t), num(*d)])
                    .map_err(csv_err(&path))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
