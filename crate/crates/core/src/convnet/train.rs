//! Mini-batch SGD training and superpixel-level prediction.

use std::path::Path;

use rand::seq::SliceRandom;

use super::net::{backward, forward, Mode, Tensor};
use super::params::{InitScheme, NetworkParams};
use super::spec::NetworkSpec;
use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::seed;
use crate::tps::PatchDataset;

const PREDICT_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// L2 penalty on weights (not biases).
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides every dropout layer's rate when set.
    pub dropout_rate: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 100,
            dropout_rate: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            Error::InvalidArgument("learning rate must be non-negative".into())
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            Error::InvalidArgument("momentum must lie in [0, 1)".into())
        );
        ensure!(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            Error::InvalidArgument("weight decay must be non-negative".into())
        );
        ensure!(self.batch_size > 0, Error::InvalidArgument("batch size must be positive".into()));
        if let Some(r) = self.dropout_rate {
            ensure!(
                (0.0..1.0).contains(&r),
                Error::InvalidArgument(format!("dropout rate {r} outside [0, 1)"))
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's mini-batches (train mode).
    pub loss: f64,
    /// Fraction of training samples classified correctly during the epoch.
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

pub fn write_trace(trace: &[EpochStats], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["epoch", "loss", "train_accuracy", "validation_accuracy"])
        .map_err(csv_err)?;
    for s in trace {
        w.write_record([
            s.epoch.to_string(),
            format!("{:?}", s.loss),
            format!("{:?}", s.train_accuracy),
            s.validation_accuracy.map_or(String::new(), |v| format!("{v:?}")),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn check_dataset(spec: &NetworkSpec, data: &PatchDataset) -> Result<()> {
    ensure!(
        data.patch_size * data.patch_size == spec.input_len() && spec.input().0 == 1,
        Error::DimensionMismatch(format!(
            "{} px patches for network input {:?}",
            data.patch_size,
            spec.input()
        ))
    );
    Ok(())
}

fn batch_tensor(spec: &NetworkSpec, data: &PatchDataset, idx: &[usize]) -> Result<Tensor> {
    let (c, h, w) = spec.input();
    let mut values = Vec::with_capacity(idx.len() * spec.input_len());
    for &i in idx {
        values.extend(data.patch(i).iter().map(|&v| v as f64));
    }
    Tensor::new(vec![idx.len(), c, h, w], values)
}

/// Train from a fresh He-uniform initialization seeded by `cfg.seed`.
pub fn train_sgd(
    spec: &NetworkSpec,
    train: &PatchDataset,
    validation: Option<&PatchDataset>,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, Vec<EpochStats>)> {
    let init = NetworkParams::init(spec, InitScheme::HeUniform, cfg.seed);
    train_sgd_from(spec, init, train, validation, cfg)
}

/// SGD with momentum and weight decay starting from `params`. Parameters are
/// kept on the `f32` grid after each step. Results depend only on the inputs
/// and `cfg.seed`, never on thread count.
pub fn train_sgd_from(
    spec: &NetworkSpec,
    mut params: NetworkParams,
    train: &PatchDataset,
    validation: Option<&PatchDataset>,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, Vec<EpochStats>)> {
    cfg.validate()?;
    params.check_shapes(spec)?;
    check_dataset(spec, train)?;
    if let Some(v) = validation {
        check_dataset(spec, v)?;
    }
    ensure!(!train.is_empty(), Error::InvalidArgument("empty training set".into()));
    ensure!(
        train.labels.contains(&0) && train.labels.contains(&1),
        Error::InvalidArgument("training set needs both classes".into())
    );
    let net = match cfg.dropout_rate {
        Some(r) => spec.with_dropout(r)?,
        None => spec.clone(),
    };
    let mut velocity = params.zeros_like();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::stream(cfg.seed, &[1, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = batch_tensor(spec, train, idx)?;
            let labels: Vec<u8> = idx.iter().map(|&i| train.labels[i]).collect();
            let out = backward(&net, &params, &x, &labels, seed::derive_seed(cfg.seed, &[2, epoch as u64, bi as u64]))?;
            loss_sum += out.loss * idx.len() as f64;
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(i, &l)| (out.probabilities.row(i)[1] > out.probabilities.row(i)[0]) == (l == 1))
                .count();
            for ((p, v), g) in params
                .layers
                .iter_mut()
                .zip(velocity.layers.iter_mut())
                .zip(&out.gradients.layers)
            {
                for ((w, vw), gw) in p.weights.iter_mut().zip(v.weights.iter_mut()).zip(&g.weights) {
                    *vw = cfg.momentum * *vw - cfg.learning_rate * (gw + cfg.weight_decay * *w);
                    *w = (*w + *vw) as f32 as f64;
                }
                for ((b, vb), gb) in p.bias.iter_mut().zip(v.bias.iter_mut()).zip(&g.bias) {
                    *vb = cfg.momentum * *vb - cfg.learning_rate * gb;
                    *b = (*b + *vb) as f32 as f64;
                }
            }
        }
        let validation_accuracy = validation
            .filter(|v| !v.is_empty())
            .map(|v| -> Result<f64> {
                let p = predict_dataset(spec, &params, v)?;
                let ok = p
                    .iter()
                    .zip(&v.labels)
                    .filter(|&(&p, &l)| (p > 0.5) == (l == 1))
                    .count();
                Ok(ok as f64 / v.len() as f64)
            })
            .transpose()?;
        trace.push(EpochStats {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            validation_accuracy,
        });
    }
    Ok((params, trace))
}

/// Test-mode class-1 probability for each patch of a dataset.
pub fn predict_dataset(spec: &NetworkSpec, params: &NetworkParams, data: &PatchDataset) -> Result<Vec<f64>> {
    check_dataset(spec, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(PREDICT_BATCH) {
        let probs = forward(spec, params, &batch_tensor(spec, data, chunk)?, Mode::Test)?;
        out.extend((0..chunk.len()).map(|i| probs.row(i)[1]));
    }
    Ok(out)
}

/// Test-mode class-1 probability for each patch.
pub fn predict_patches(spec: &NetworkSpec, params: &NetworkParams, patches: &[Image]) -> Result<Vec<f64>> {
    let (c, h, w) = spec.input();
    ensure!(
        c == 1 && patches.iter().all(|p| p.dims() == (w, h)),
        Error::DimensionMismatch(format!("patches do not match network input {:?}", spec.input()))
    );
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(PREDICT_BATCH) {
        let data: Vec<f64> = chunk.iter().flat_map(|p| p.data().iter().map(|&v| v as f64)).collect();
        let probs = forward(spec, params, &Tensor::new(vec![chunk.len(), c, h, w], data)?, Mode::Test)?;
        out.extend((0..chunk.len()).map(|i| probs.row(i)[1]));
    }
    Ok(out)
}

/// Mean of per-scale probabilities, summed in scale order.
pub fn mean_probability(per_scale: &[f64]) -> Result<f64> {
    ensure!(
        !per_scale.is_empty(),
        Error::InvalidArgument("no patches for superpixel".into())
    );
    let mut sum = 0.0;
    for &p in per_scale {
        sum += p;
    }
    Ok(sum / per_scale.len() as f64)
}

/// Superpixel probability from its `N_s` scale patches.
pub fn predict_superpixel(spec: &NetworkSpec, params: &NetworkParams, patches: &[Image]) -> Result<f64> {
    ensure!(
        !patches.is_empty(),
        Error::InvalidArgument("no patches for superpixel".into())
    );
    mean_probability(&predict_patches(spec, params, patches)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::spec::Layer;
    use crate::tps::Provenance;
    use rand::{Rng, SeedableRng};

    fn prov(i: usize) -> Provenance {
        Provenance {
            volume: 0,
            slice: 0,
            superpixel: i as u32,
            scale_index: 0,
            deformation_index: 0,
        }
    }

    fn bright_dark(n: usize, size: usize, seed: u64) -> PatchDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ds = PatchDataset::new(size);
        for i in 0..n {
            let label = (i % 2) as u8;
            let base = if label == 1 { 0.7 } else { 0.3 };
            let img = Image::from_fn(size, size, |_, _| base + rng.random_range(-0.15f32..0.15));
            ds.push(&img, label, prov(i)).unwrap();
        }
        ds
    }

    fn small_net(size: usize) -> NetworkSpec {
        use Layer::*;
        NetworkSpec::new(
            (1, size, size),
            vec![
                Conv {
                    out_channels: 4,
                    kernel: 5,
                    stride: 2,
                    pad: 2,
                },
                Relu,
                Layer::pool(2),
                Layer::conv(4, 3),
                Relu,
                Layer::pool(2),
                Layer::conv(4, 3),
                Relu,
                Layer::conv(4, 3),
                Relu,
                Layer::pool(2),
                Layer::conv(8, 3),
                Relu,
                Layer::pool(2),
                Layer::fc(64),
                Relu,
                Dropout { rate: 0.5 },
                Layer::fc(2),
                Softmax { classes: 2 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn bright_versus_dark_is_learned() {
        let spec = small_net(64);
        let ds = bright_dark(500, 64, 1);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 32,
            seed: 3,
            ..Default::default()
        };
        let (params, trace) = train_sgd(&spec, &ds, None, &cfg).unwrap();
        assert_eq!(trace.len(), 20);
        assert!(trace.iter().any(|s| s.train_accuracy >= 0.98), "{trace:?}");
        let p = predict_dataset(&spec, &params, &ds).unwrap();
        let ok = p.iter().zip(&ds.labels).filter(|&(&p, &l)| (p > 0.5) == (l == 1)).count();
        assert!(ok as f64 / ds.len() as f64 >= 0.98);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let spec = small_net(32);
        let ds = bright_dark(40, 32, 2);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        let (params, _) = train_sgd(&spec, &ds, None, &cfg).unwrap();
        assert_eq!(params, NetworkParams::init(&spec, InitScheme::HeUniform, cfg.seed));
    }

    #[test]
    fn training_is_deterministic() {
        let spec = small_net(32);
        let ds = bright_dark(60, 32, 4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 20,
            seed: 5,
            ..Default::default()
        };
        let a = train_sgd(&spec, &ds, Some(&ds), &cfg).unwrap();
        let b = train_sgd(&spec, &ds, Some(&ds), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.1[0].validation_accuracy.is_some());
        assert!(a.0.to_bytes(&spec).is_ok());
    }

    #[test]
    fn bad_training_sets_are_rejected() {
        let spec = small_net(32);
        let cfg = TrainConfig::default();
        assert!(train_sgd(&spec, &PatchDataset::new(32), None, &cfg).is_err());
        let mut one_class = bright_dark(10, 32, 0);
        one_class.labels.fill(1);
        assert!(train_sgd(&spec, &one_class, None, &cfg).is_err());
        assert!(train_sgd(&spec, &bright_dark(10, 16, 0), None, &cfg).is_err());
        let bad = TrainConfig {
            dropout_rate: Some(1.0),
            ..cfg
        };
        assert!(train_sgd(&spec, &bright_dark(10, 32, 0), None, &bad).is_err());
    }

    #[test]
    fn trace_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = vec![
            EpochStats {
                epoch: 0,
                loss: 0.693,
                train_accuracy: 0.5,
                validation_accuracy: None,
            },
            EpochStats {
                epoch: 1,
                loss: 0.1,
                train_accuracy: 0.97,
                validation_accuracy: Some(0.9),
            },
        ];
        write_trace(&trace, &path).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<csv::StringRecord> = r.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1][1].parse::<f64>().unwrap(), 0.1);
        assert_eq!(&rows[0][3], "");
    }

    #[test]
    fn superpixel_probability_is_the_scale_mean() {
        assert_eq!(mean_probability(&[0.2, 0.4, 0.6, 0.8]).unwrap(), 0.5);
        assert_eq!(mean_probability(&[0.37]).unwrap(), 0.37);
        assert!(mean_probability(&[]).is_err());
        let spec = small_net(32);
        let params = NetworkParams::init(&spec, InitScheme::HeUniform, 9);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let patches: Vec<Image> = (0..4)
            .map(|_| Image::from_fn(32, 32, |_, _| rng.random::<f32>()))
            .collect();
        let p = predict_superpixel(&spec, &params, &patches).unwrap();
        let singles: Vec<f64> = patches
            .iter()
            .map(|q| predict_superpixel(&spec, &params, std::slice::from_ref(q)).unwrap())
            .collect();
        let lo = singles.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = singles.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= p && p <= hi);
        assert!(predict_superpixel(&spec, &params, &[]).is_err());
    }
}
