//! Trainable weights, initialization and the binary params file.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use super::spec::NetworkSpec;
use crate::error::{ensure, Error, Result};
use crate::seed;

const MAGIC: &[u8; 8] = b"SPSEGCN\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform on ±sqrt(6 / fan_in), zero biases.
    HeUniform,
    Zeros,
}

impl InitScheme {
    fn code(self) -> u8 {
        match self {
            InitScheme::HeUniform => 0,
            InitScheme::Zeros => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(InitScheme::HeUniform),
            1 => Ok(InitScheme::Zeros),
            _ => Err(Error::Model(format!("unknown init scheme {c}"))),
        }
    }
}

/// Weights and biases of one parameterized layer. Convolution weights are
/// laid out [out][in][ky][kx], dense weights [out][in].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// One `LayerParams` per layer (empty for parameter-free layers). The same
/// structure holds gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    pub seed: u64,
    pub scheme: InitScheme,
}

impl NetworkParams {
    /// Initialize for `spec`. Values are rounded to `f32` so that saved
    /// params reload bit-exactly.
    pub fn init(spec: &NetworkSpec, scheme: InitScheme, seed: u64) -> Self {
        let layers = spec
            .layers()
            .iter()
            .enumerate()
            .map(|(i, layer)| match layer.param_counts(spec.shape_at(i)) {
                None => LayerParams {
                    weights: Vec::new(),
                    bias: Vec::new(),
                },
                Some((nw, nb, fan_in)) => {
                    let weights = match scheme {
                        InitScheme::Zeros => vec![0.0; nw],
                        InitScheme::HeUniform => {
                            let bound = (6.0 / fan_in as f64).sqrt();
                            let mut rng = seed::stream(seed, &[i as u64]);
                            (0..nw)
                                .map(|_| rng.random_range(-bound..bound) as f32 as f64)
                                .collect()
                        }
                    };
                    LayerParams {
                        weights,
                        bias: vec![0.0; nb],
                    }
                }
            })
            .collect();
        Self {
            layers,
            seed,
            scheme,
        }
    }

    /// Zero-valued params of the same shape.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            seed: self.seed,
            scheme: self.scheme,
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All scalars in layer order, weights before biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn check_shapes(&self, spec: &NetworkSpec) -> Result<()> {
        ensure!(
            self.layers.len() == spec.layers().len(),
            Error::Model(format!(
                "params have {} layers, network has {}",
                self.layers.len(),
                spec.layers().len()
            ))
        );
        for (i, (layer, p)) in spec.layers().iter().zip(&self.layers).enumerate() {
            let (nw, nb) = layer
                .param_counts(spec.shape_at(i))
                .map_or((0, 0), |(w, b, _)| (w, b));
            ensure!(
                p.weights.len() == nw && p.bias.len() == nb,
                Error::Model(format!(
                    "layer {i} ({layer}): expected {nw}+{nb} params, found {}+{}",
                    p.weights.len(),
                    p.bias.len()
                ))
            );
        }
        Ok(())
    }

    /// Params file: magic, version, network text and its hash, init
    /// metadata, then per layer the weight and bias counts and `f32` values.
    pub fn to_bytes(&self, spec: &NetworkSpec) -> Result<Vec<u8>> {
        self.check_shapes(spec)?;
        for v in self.values() {
            ensure!(
                v.is_finite() && (*v as f32) as f64 == *v,
                Error::Model("params must be finite and representable as f32".into())
            );
        }
        let text = spec.to_string();
        let mut out = Vec::with_capacity(64 + text.len() + self.len() * 4);
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(FORMAT_VERSION).unwrap();
        out.extend_from_slice(&spec.hash());
        out.write_u32::<LE>(text.len() as u32).unwrap();
        out.extend_from_slice(text.as_bytes());
        out.write_u64::<LE>(self.seed).unwrap();
        out.write_u8(self.scheme.code()).unwrap();
        out.write_u32::<LE>(self.layers.len() as u32).unwrap();
        for l in &self.layers {
            out.write_u64::<LE>(l.weights.len() as u64).unwrap();
            out.write_u64::<LE>(l.bias.len() as u64).unwrap();
            for &v in l.weights.iter().chain(&l.bias) {
                out.write_f32::<LE>(v as f32).unwrap();
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(NetworkSpec, Self)> {
        let bad = |e: std::io::Error| Error::Model(format!("truncated params file: {e}"));
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        ensure!(&magic == MAGIC, Error::Model("not a network params file".into()));
        let version = r.read_u32::<LE>().map_err(bad)?;
        ensure!(
            version == FORMAT_VERSION,
            Error::Model(format!("unsupported params version {version}"))
        );
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash).map_err(bad)?;
        let text_len = r.read_u32::<LE>().map_err(bad)? as usize;
        ensure!(
            text_len <= bytes.len(),
            Error::Model("corrupt network description".into())
        );
        let mut text = vec![0u8; text_len];
        r.read_exact(&mut text).map_err(bad)?;
        let text =
            String::from_utf8(text).map_err(|_| Error::Model("network text is not UTF-8".into()))?;
        let spec: NetworkSpec = text.parse()?;
        ensure!(
            spec.hash() == hash,
            Error::Model("network hash does not match its description".into())
        );
        let seed = r.read_u64::<LE>().map_err(bad)?;
        let scheme = InitScheme::from_code(r.read_u8().map_err(bad)?)?;
        let count = r.read_u32::<LE>().map_err(bad)? as usize;
        ensure!(
            count == spec.layers().len(),
            Error::Model("layer count does not match network".into())
        );
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let nw = r.read_u64::<LE>().map_err(bad)? as usize;
            let nb = r.read_u64::<LE>().map_err(bad)? as usize;
            ensure!(
                nw.saturating_add(nb).saturating_mul(4) <= bytes.len(),
                Error::Model("corrupt layer header".into())
            );
            let mut read = |n: usize| -> Result<Vec<f64>> {
                (0..n)
                    .map(|_| r.read_f32::<LE>().map(f64::from).map_err(bad))
                    .collect()
            };
            let weights = read(nw)?;
            let bias = read(nb)?;
            layers.push(LayerParams { weights, bias });
        }
        ensure!(
            r.position() as usize == bytes.len(),
            Error::Model("trailing bytes in params file".into())
        );
        let params = Self {
            layers,
            seed,
            scheme,
        };
        params.check_shapes(&spec)?;
        Ok((spec, params))
    }

    pub fn save(&self, spec: &NetworkSpec, path: &Path) -> Result<()> {
        let bytes = self.to_bytes(spec)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(NetworkSpec, Self)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
