//! Forward and backward passes.
//!
//! Samples are processed independently, so a sample's output never depends
//! on the rest of its batch. Batch gradients are summed over fixed-size
//! chunks in index order, which keeps results identical for any thread count.

use rand::Rng;
use rayon::prelude::*;

use super::params::{LayerParams, NetworkParams};
use super::spec::{Layer, NetworkSpec, Shape};
use crate::error::{ensure, Error, Result};
use crate::seed;

/// Clamp inside the log of the cross-entropy.
pub const LOSS_EPSILON: f64 = 1e-12;
const CHUNK: usize = 8;

/// Dense row-major array of up to four dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        ensure!(
            (1..=4).contains(&shape.len()),
            Error::InvalidArgument(format!("tensor rank {} outside 1..=4", shape.len()))
        );
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            Error::DimensionMismatch(format!("shape {shape:?} holds {n} values, got {}", data.len()))
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// Batch of `f32` samples, each `c·h·w` values.
    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Leading dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Row `i` of a batch × k tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        self.sample(i)
    }
}

/// Dropout behaviour. In training, each sample's masks come from a stream
/// derived from `seed`, the sample's index in the batch and the layer index,
/// so a forward/backward pair with the same seed sees identical masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Test,
    Train { seed: u64 },
}

enum Aux {
    None,
    Cols(Vec<f64>),
    Argmax(Vec<u32>),
    Mask(Vec<f64>),
}

struct SampleTrace {
    /// `acts[i]` is the input of layer `i`; the last entry is the output.
    acts: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

fn check_batch(spec: &NetworkSpec, params: &NetworkParams, batch: &Tensor) -> Result<()> {
    let (c, h, w) = spec.input();
    let ok = match batch.shape() {
        [_, bc, bh, bw] => (*bc, *bh, *bw) == (c, h, w),
        [_, n] => *n == c * h * w,
        _ => false,
    };
    ensure!(
        ok,
        Error::DimensionMismatch(format!(
            "batch shape {:?} does not match network input {:?}",
            batch.shape(),
            spec.input()
        ))
    );
    params.check_shapes(spec)
}

/// C (m×n) = beta·C + A·B with A (m×k), B (k×n). `ta`/`tb` read A or B
/// from transposed storage.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover every index addressed by these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], (c, h, w): Shape, kernel: usize, stride: usize, pad: usize, (ho, wo): (usize, usize)) -> Vec<f64> {
    let spatial = ho * wo;
    let mut cols = vec![0.0; c * kernel * kernel * spatial];
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ((ci * kernel + ky) * kernel + kx) * spatial;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[row + oy * wo + ox] = x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], (c, h, w): Shape, kernel: usize, stride: usize, pad: usize, (ho, wo): (usize, usize)) -> Vec<f64> {
    let spatial = ho * wo;
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ((ci * kernel + ky) * kernel + kx) * spatial;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[(ci * h + iy as usize) * w + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn forward_sample(spec: &NetworkSpec, params: &NetworkParams, x: &[f64], mode: Mode, index: usize) -> SampleTrace {
    let mut acts = Vec::with_capacity(spec.layers().len() + 1);
    let mut aux = Vec::with_capacity(spec.layers().len());
    acts.push(x.to_vec());
    for (li, layer) in spec.layers().iter().enumerate() {
        let input = acts.last().unwrap();
        let in_shape = spec.shape_at(li);
        let (oc, oh, ow) = spec.shape_at(li + 1);
        let LayerParams { weights, bias } = &params.layers[li];
        let (out, a) = match *layer {
            Layer::Conv {
                kernel,
                stride,
                pad,
                ..
            } => {
                let cols = im2col(input, in_shape, kernel, stride, pad, (oh, ow));
                let spatial = oh * ow;
                let mut out = vec![0.0; oc * spatial];
                for (o, chunk) in out.chunks_mut(spatial).enumerate() {
                    chunk.fill(bias[o]);
                }
                gemm(oc, in_shape.0 * kernel * kernel, spatial, weights, false, &cols, false, &mut out, 1.0);
                (out, Aux::Cols(cols))
            }
            Layer::MaxPool { window, stride } => {
                let (c, h, w) = in_shape;
                let mut out = vec![0.0; oc * oh * ow];
                let mut arg = vec![0u32; oc * oh * ow];
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = 0;
                            for ky in 0..window {
                                for kx in 0..window {
                                    let i = (ci * h + oy * stride + ky) * w + ox * stride + kx;
                                    if input[i] > best {
                                        best = input[i];
                                        best_i = i;
                                    }
                                }
                            }
                            let o = (ci * oh + oy) * ow + ox;
                            out[o] = best;
                            arg[o] = best_i as u32;
                        }
                    }
                }
                (out, Aux::Argmax(arg))
            }
            Layer::Relu => (input.iter().map(|&v| v.max(0.0)).collect(), Aux::None),
            Layer::FullyConnected { out_units } => {
                let n = input.len();
                let out = (0..out_units)
                    .map(|o| {
                        let row = &weights[o * n..(o + 1) * n];
                        bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
                    })
                    .collect();
                (out, Aux::None)
            }
            Layer::Dropout { rate } => match mode {
                Mode::Train { seed } if rate > 0.0 => {
                    let mut rng = seed::stream(seed, &[index as u64, li as u64]);
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..input.len())
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                        .collect();
                    (input.iter().zip(&mask).map(|(x, m)| x * m).collect(), Aux::Mask(mask))
                }
                _ => (input.clone(), Aux::None),
            },
            Layer::Softmax { .. } => (softmax(input), Aux::None),
        };
        acts.push(out);
        aux.push(a);
    }
    SampleTrace { acts, aux }
}

/// Gradient contribution of one sample, given the gradient at the softmax
/// input (or at the output for networks without softmax).
fn backward_sample(spec: &NetworkSpec, params: &NetworkParams, trace: &SampleTrace, top: Vec<f64>, grads: &mut NetworkParams) {
    let n_layers = spec.layers().len();
    let last = if spec.ends_in_softmax() { n_layers - 1 } else { n_layers };
    let mut g = top;
    for li in (0..last).rev() {
        let input = &trace.acts[li];
        let in_shape = spec.shape_at(li);
        let (oc, oh, ow) = spec.shape_at(li + 1);
        let weights = &params.layers[li].weights;
        let gl = &mut grads.layers[li];
        g = match (spec.layers()[li], &trace.aux[li]) {
            (Layer::Conv { kernel, stride, pad, .. }, Aux::Cols(cols)) => {
                let spatial = oh * ow;
                let k = in_shape.0 * kernel * kernel;
                for (o, chunk) in g.chunks(spatial).enumerate() {
                    gl.bias[o] += chunk.iter().sum::<f64>();
                }
                gemm(oc, spatial, k, &g, false, cols, true, &mut gl.weights, 1.0);
                if li == 0 {
                    break;
                }
                let mut dcols = vec![0.0; k * spatial];
                gemm(k, oc, spatial, weights, true, &g, false, &mut dcols, 0.0);
                col2im(&dcols, in_shape, kernel, stride, pad, (oh, ow))
            }
            (Layer::MaxPool { .. }, Aux::Argmax(arg)) => {
                let mut dx = vec![0.0; input.len()];
                for (o, &i) in arg.iter().enumerate() {
                    dx[i as usize] += g[o];
                }
                dx
            }
            (Layer::Relu, _) => g
                .iter()
                .zip(input)
                .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                .collect(),
            (Layer::FullyConnected { out_units }, _) => {
                let n = input.len();
                let mut dx = vec![0.0; n];
                for o in 0..out_units {
                    let d = g[o];
                    gl.bias[o] += d;
                    if d == 0.0 {
                        continue;
                    }
                    let gw = &mut gl.weights[o * n..(o + 1) * n];
                    for (gw, x) in gw.iter_mut().zip(input) {
                        *gw += d * x;
                    }
                    for (dx, w) in dx.iter_mut().zip(&weights[o * n..(o + 1) * n]) {
                        *dx += d * w;
                    }
                }
                dx
            }
            (Layer::Dropout { .. }, Aux::Mask(mask)) => g.iter().zip(mask).map(|(d, m)| d * m).collect(),
            (Layer::Dropout { .. }, _) => g,
            (layer, _) => unreachable!("inconsistent trace for {layer}"),
        };
    }
}

fn traces(spec: &NetworkSpec, params: &NetworkParams, batch: &Tensor, mode: Mode) -> Vec<SampleTrace> {
    (0..batch.batch())
        .into_par_iter()
        .with_min_len(CHUNK)
        .map(|i| forward_sample(spec, params, batch.sample(i), mode, i))
        .collect()
}

/// Output of the last layer for every sample (batch × outputs).
pub fn forward_activations(spec: &NetworkSpec, params: &NetworkParams, batch: &Tensor, mode: Mode) -> Result<Tensor> {
    check_batch(spec, params, batch)?;
    let out_len = spec.output_len();
    let data: Vec<f64> = (0..batch.batch())
        .into_par_iter()
        .with_min_len(CHUNK)
        .flat_map_iter(|i| {
            let mut t = forward_sample(spec, params, batch.sample(i), mode, i);
            t.acts.pop().unwrap()
        })
        .collect();
    let out = Tensor::new(vec![batch.batch(), out_len], data)?;
    ensure!(
        out.data().iter().all(|v| v.is_finite()),
        Error::Data("non-finite network output".into())
    );
    Ok(out)
}

/// Class probabilities (batch × classes).
pub fn forward(spec: &NetworkSpec, params: &NetworkParams, batch: &Tensor, mode: Mode) -> Result<Tensor> {
    ensure!(
        spec.ends_in_softmax(),
        Error::InvalidArgument("network does not end in a softmax".into())
    );
    forward_activations(spec, params, batch, mode)
}

fn sample_loss(p: &[f64], label: u8) -> f64 {
    -p[label as usize].max(LOSS_EPSILON).ln()
}

/// Mean cross-entropy of probability rows against class labels.
pub fn loss(probabilities: &Tensor, labels: &[u8]) -> Result<f64> {
    ensure!(
        probabilities.shape().len() == 2 && probabilities.batch() == labels.len() && !labels.is_empty(),
        Error::DimensionMismatch(format!(
            "{:?} probabilities for {} labels",
            probabilities.shape(),
            labels.len()
        ))
    );
    let classes = probabilities.shape()[1];
    ensure!(
        labels.iter().all(|&l| (l as usize) < classes && l <= 1),
        Error::InvalidArgument("labels must be 0 or 1".into())
    );
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sample_loss(probabilities.row(i), l))
        .sum();
    Ok(total / labels.len() as f64)
}

pub struct BackwardOutput {
    /// Gradient of the mean cross-entropy, same layout as the params.
    pub gradients: NetworkParams,
    pub loss: f64,
    pub probabilities: Tensor,
}

/// Train-mode forward pass followed by backpropagation of the mean
/// cross-entropy. Dropout masks match `forward` with `Mode::Train { seed }`.
pub fn backward(spec: &NetworkSpec, params: &NetworkParams, batch: &Tensor, labels: &[u8], seed: u64) -> Result<BackwardOutput> {
    ensure!(
        spec.ends_in_softmax(),
        Error::InvalidArgument("network does not end in a softmax".into())
    );
    check_batch(spec, params, batch)?;
    let b = batch.batch();
    ensure!(
        labels.len() == b && b > 0,
        Error::DimensionMismatch(format!("{} labels for a batch of {b}", labels.len()))
    );
    ensure!(
        labels.iter().all(|&l| (l as usize) < spec.output_len() && l <= 1),
        Error::InvalidArgument("labels must be 0 or 1".into())
    );
    let scale = 1.0 / b as f64;
    let chunks: Vec<(NetworkParams, Vec<f64>, Vec<f64>)> = (0..b.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut grads = params.zeros_like();
            let mut losses = Vec::with_capacity(CHUNK);
            let mut probs = Vec::new();
            for i in c * CHUNK..((c + 1) * CHUNK).min(b) {
                let trace = forward_sample(spec, params, batch.sample(i), Mode::Train { seed }, i);
                let p = trace.acts.last().unwrap();
                let y = labels[i] as usize;
                losses.push(sample_loss(p, labels[i]));
                let top = if p[y] > LOSS_EPSILON {
                    p.iter()
                        .enumerate()
                        .map(|(k, &pk)| (pk - if k == y { 1.0 } else { 0.0 }) * scale)
                        .collect()
                } else {
                    vec![0.0; p.len()]
                };
                backward_sample(spec, params, &trace, top, &mut grads);
                probs.extend_from_slice(p);
            }
            (grads, losses, probs)
        })
        .collect();
    let mut gradients = params.zeros_like();
    let mut total = 0.0;
    let mut probs = Vec::with_capacity(b * spec.output_len());
    for (g, l, p) in chunks {
        gradients.add_assign(&g);
        for x in l {
            total += x;
        }
        probs.extend(p);
    }
    ensure!(
        gradients.values().all(|v| v.is_finite()),
        Error::Data("non-finite gradient".into())
    );
    Ok(BackwardOutput {
        gradients,
        loss: total / b as f64,
        probabilities: Tensor::new(vec![b, spec.output_len()], probs)?,
    })
}

/// Smallest distance of the batch from a non-differentiable point: the
/// minimum over ReLU inputs of |z| and over pooling windows of the gap
/// between the two largest values.
pub fn kink_margin(spec: &NetworkSpec, params: &NetworkParams, batch: &Tensor, mode: Mode) -> Result<f64> {
    check_batch(spec, params, batch)?;
    let margin = traces(spec, params, batch, mode)
        .iter()
        .map(|t| {
            let mut m = f64::INFINITY;
            for (li, layer) in spec.layers().iter().enumerate() {
                let input = &t.acts[li];
                match *layer {
                    Layer::Relu => {
                        m = input.iter().fold(m, |m, v| m.min(v.abs()));
                    }
                    Layer::MaxPool { window, stride } => {
                        let (c, h, w) = spec.shape_at(li);
                        let (_, oh, ow) = spec.shape_at(li + 1);
                        for ci in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut vals: Vec<f64> = (0..window * window)
                                        .map(|k| input[(ci * h + oy * stride + k / window) * w + ox * stride + k % window])
                                        .collect();
                                    vals.sort_by(|a, b| b.total_cmp(a));
                                    if vals.len() > 1 {
                                        m = m.min(vals[0] - vals[1]);
                                    }
                                }
                            }
                        }
                    }
                    _ => {}
                }
            }
            m
        })
        .fold(f64::INFINITY, f64::min);
    Ok(margin)
}

fn param_mut(p: &mut NetworkParams, layer: usize, bias: bool, k: usize) -> &mut f64 {
    let l = &mut p.layers[layer];
    if bias {
        &mut l.bias[k]
    } else {
        &mut l.weights[k]
    }
}

/// Largest relative error between `backward` and central finite
/// differences of the train-mode loss over every parameter. Pairs where both
/// values are exactly zero count as agreeing.
pub fn gradient_check(spec: &NetworkSpec, params: &NetworkParams, batch: &Tensor, labels: &[u8], seed: u64, h: f64) -> Result<f64> {
    let mut analytic = backward(spec, params, batch, labels, seed)?.gradients;
    let mode = Mode::Train { seed };
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for li in 0..params.layers.len() {
        for bias in [false, true] {
            let n = if bias { params.layers[li].bias.len() } else { params.layers[li].weights.len() };
            for k in 0..n {
                let orig = *param_mut(&mut probe, li, bias, k);
                *param_mut(&mut probe, li, bias, k) = orig + h;
                let up = loss(&forward(spec, &probe, batch, mode)?, labels)?;
                *param_mut(&mut probe, li, bias, k) = orig - h;
                let down = loss(&forward(spec, &probe, batch, mode)?, labels)?;
                *param_mut(&mut probe, li, bias, k) = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = *param_mut(&mut analytic, li, bias, k);
                let scale = a.abs().max(numeric.abs());
                if scale > 0.0 {
                    worst = worst.max((a - numeric).abs() / scale);
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::super::params::InitScheme;
    use super::*;
    use crate::convnet::spec::Layer::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tiny() -> NetworkSpec {
        NetworkSpec::custom(
            (1, 6, 6),
            vec![
                Layer::conv(3, 3),
                Relu,
                Layer::pool(2),
                Conv {
                    out_channels: 2,
                    kernel: 2,
                    stride: 1,
                    pad: 0,
                },
                Relu,
                Layer::fc(4),
                Relu,
                Dropout { rate: 0.3 },
                Layer::fc(2),
                Softmax { classes: 2 },
            ],
        )
        .unwrap()
    }

    fn random_batch(spec: &NetworkSpec, b: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = spec.input();
        let data = (0..b * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![b, c, h, w], data).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let spec = NetworkSpec::compact_32();
        let p = NetworkParams::init(&spec, InitScheme::Zeros, 0);
        let out = forward(&spec, &p, &random_batch(&spec, 3, 1), Mode::Test).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_1x1_conv_reproduces_input() {
        let spec = NetworkSpec::custom((1, 5, 4), vec![Layer::conv(1, 1)]).unwrap();
        let mut p = NetworkParams::init(&spec, InitScheme::Zeros, 0);
        p.layers[0].weights[0] = 1.0;
        let x = random_batch(&spec, 2, 3);
        let out = forward_activations(&spec, &p, &x, Mode::Test).unwrap();
        assert_eq!(out.data(), x.data());
        assert!(forward(&spec, &p, &x, Mode::Test).is_err());
    }

    #[test]
    fn conv_matches_direct_loops() {
        let spec = NetworkSpec::custom(
            (2, 5, 6),
            vec![Conv {
                out_channels: 3,
                kernel: 3,
                stride: 2,
                pad: 1,
            }],
        )
        .unwrap();
        let p = NetworkParams::init(&spec, InitScheme::HeUniform, 8);
        let mut p = p;
        p.layers[0].bias = vec![0.1, -0.2, 0.3];
        let x = random_batch(&spec, 1, 4);
        let out = forward_activations(&spec, &p, &x, Mode::Test).unwrap();
        let (oc, oh, ow) = spec.output_shape();
        let xs = x.sample(0);
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = p.layers[0].bias[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                    s += p.layers[0].weights[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * xs[(c * 5 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = out.row(0)[(o * oh + oy) * ow + ox];
                    assert!((got - s).abs() < 1e-12, "{got} vs {s}");
                }
            }
        }
    }

    #[test]
    fn test_mode_is_pure_and_batch_independent() {
        let spec = tiny();
        let p = NetworkParams::init(&spec, InitScheme::HeUniform, 2);
        let x = random_batch(&spec, 20, 5);
        let a = forward(&spec, &p, &x, Mode::Test).unwrap();
        let b = forward(&spec, &p, &x, Mode::Test).unwrap();
        assert_eq!(a, b);
        for i in 0..20 {
            let single = Tensor::new(vec![1, 1, 6, 6], x.sample(i).to_vec()).unwrap();
            let s = forward(&spec, &p, &single, Mode::Test).unwrap();
            assert_eq!(s.row(0), a.row(i));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let spec = tiny();
        let p = NetworkParams::init(&spec, InitScheme::HeUniform, 2);
        let x = Tensor::zeros(vec![2, 1, 5, 6]).unwrap();
        assert!(forward(&spec, &p, &x, Mode::Test).is_err());
        assert!(backward(&spec, &p, &random_batch(&spec, 2, 1), &[0], 0).is_err());
        assert!(backward(&spec, &p, &random_batch(&spec, 1, 1), &[2], 0).is_err());
        let other = NetworkParams::init(&NetworkSpec::compact_32(), InitScheme::Zeros, 0);
        assert!(forward(&spec, &other, &random_batch(&spec, 1, 1), Mode::Test).is_err());
    }

    #[test]
    fn loss_contract() {
        let t = |p: f64| Tensor::new(vec![1, 2], vec![1.0 - p, p]).unwrap();
        assert_eq!(loss(&t(1.0), &[1]).unwrap(), 0.0);
        assert!((loss(&t(0.5), &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((loss(&t(0.0), &[1]).unwrap() - 27.631021115928547).abs() < 1e-9);
        assert!(loss(&t(0.5), &[2]).is_err());
        assert!(loss(&t(0.5), &[0, 1]).is_err());
    }

    #[test]
    fn zero_input_gives_zero_conv_weight_gradient() {
        let spec = tiny();
        let p = NetworkParams::init(&spec, InitScheme::HeUniform, 6);
        let x = Tensor::zeros(vec![3, 1, 6, 6]).unwrap();
        let out = backward(&spec, &p, &x, &[0, 1, 1], 9).unwrap();
        assert!(out.gradients.layers[0].weights.iter().all(|&g| g == 0.0));
        assert!(out.gradients.layers[3].weights.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_gives_the_same_mean_gradient() {
        let spec = NetworkSpec::custom(
            (1, 6, 6),
            tiny().layers().iter().filter(|l| !matches!(l, Dropout { .. })).cloned().collect(),
        )
        .unwrap();
        let p = NetworkParams::init(&spec, InitScheme::HeUniform, 1);
        let x = random_batch(&spec, 5, 2);
        let labels = [0, 1, 1, 0, 1];
        let mut doubled = x.data().to_vec();
        doubled.extend_from_slice(x.data());
        let xx = Tensor::new(vec![10, 1, 6, 6], doubled).unwrap();
        let mut ll = labels.to_vec();
        ll.extend_from_slice(&labels);
        let a = backward(&spec, &p, &x, &labels, 0).unwrap();
        let b = backward(&spec, &p, &xx, &ll, 0).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-14);
        for (u, v) in a.gradients.values().zip(b.gradients.values()) {
            assert!((u - v).abs() <= 1e-14 * (1.0 + u.abs()), "{u} vs {v}");
        }
    }

    #[test]
    fn train_mode_masks_are_reproducible_and_match_backward() {
        let spec = tiny();
        let p = NetworkParams::init(&spec, InitScheme::HeUniform, 4);
        let x = random_batch(&spec, 12, 8);
        let labels = vec![1; 12];
        let f1 = forward(&spec, &p, &x, Mode::Train { seed: 77 }).unwrap();
        let f2 = forward(&spec, &p, &x, Mode::Train { seed: 77 }).unwrap();
        assert_eq!(f1, f2);
        let b = backward(&spec, &p, &x, &labels, 77).unwrap();
        assert_eq!(b.probabilities, f1);
        assert_eq!(b.loss, loss(&f1, &labels).unwrap());
    }

    #[test]
    fn dropout_expectation_matches_test_mode() {
        let spec = NetworkSpec::custom((1, 4, 4), vec![Dropout { rate: 0.4 }]).unwrap();
        let p = NetworkParams::init(&spec, InitScheme::Zeros, 0);
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| 0.5 + i as f64 / 8.0).collect()).unwrap();
        let draws = 20_000;
        let mut mean = vec![0.0; 16];
        for s in 0..draws {
            let out = forward_activations(&spec, &p, &x, Mode::Train { seed: s }).unwrap();
            for (m, v) in mean.iter_mut().zip(out.data()) {
                *m += v / draws as f64;
            }
        }
        let test = forward_activations(&spec, &p, &x, Mode::Test).unwrap();
        assert_eq!(test.data(), x.data());
        for (m, t) in mean.iter().zip(test.data()) {
            assert!((m - t).abs() <= 0.02 * t, "{m} vs {t}");
        }
    }

    fn tiny_checked(seed: u64) -> f64 {
        let spec = NetworkSpec::custom(
            (1, 4, 4),
            vec![
                Layer::conv(2, 3),
                Relu,
                Layer::pool(2),
                Layer::conv(3, 1),
                Relu,
                Layer::fc(3),
                Relu,
                Dropout { rate: 0.25 },
                Layer::fc(2),
                Softmax { classes: 2 },
            ],
        )
        .unwrap();
        for attempt in 0.. {
            let s = seed::derive_seed(seed, &[attempt]);
            let mut p = NetworkParams::init(&spec, InitScheme::HeUniform, s);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s);
            for b in p.layers.iter_mut().flat_map(|l| l.bias.iter_mut()) {
                *b = rng.random_range(-0.2..0.2);
            }
            let x = random_batch(&spec, 3, s);
            let labels = [0, 1, 1];
            if kink_margin(&spec, &p, &x, Mode::Train { seed: s }).unwrap() < 1e-2 {
                continue;
            }
            return gradient_check(&spec, &p, &x, &labels, s, 1e-3).unwrap();
        }
        unreachable!()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..8 {
            let err = tiny_checked(seed);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn softmax_rows_sum_to_one(seed in any::<u64>(), b in 1usize..6) {
            let spec = tiny();
            let p = NetworkParams::init(&spec, InitScheme::HeUniform, seed);
            let out = forward(&spec, &p, &random_batch(&spec, b, seed ^ 1), Mode::Train { seed }).unwrap();
            for i in 0..b {
                let r = out.row(i);
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
