//! Network architecture description, shape chaining and text form.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};

/// Activation shape of one sample: (channels, height, width).
pub type Shape = (usize, usize, usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
    FullyConnected {
        out_units: usize,
    },
    Dropout {
        rate: f64,
    },
    Softmax {
        classes: usize,
    },
}

impl Layer {
    pub fn conv(out_channels: usize, kernel: usize) -> Self {
        Layer::Conv {
            out_channels,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn pool(window: usize) -> Self {
        Layer::MaxPool {
            window,
            stride: window,
        }
    }

    pub fn fc(out_units: usize) -> Self {
        Layer::FullyConnected { out_units }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::FullyConnected { .. })
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, (c, h, w): Shape) -> Result<Shape> {
        let shape_err = |msg: String| Error::DimensionMismatch(format!("{self}: {msg}"));
        match *self {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                ensure!(
                    out_channels > 0 && kernel > 0 && stride > 0,
                    Error::InvalidArgument(format!("{self}: zero-sized parameter"))
                );
                ensure!(
                    h + 2 * pad >= kernel && w + 2 * pad >= kernel,
                    shape_err(format!("kernel larger than padded {h}x{w} input"))
                );
                Ok((
                    out_channels,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ))
            }
            Layer::MaxPool { window, stride } => {
                ensure!(
                    window > 0 && stride > 0,
                    Error::InvalidArgument(format!("{self}: zero-sized parameter"))
                );
                ensure!(
                    h >= window && w >= window,
                    shape_err(format!("window larger than {h}x{w} input"))
                );
                Ok((c, (h - window) / stride + 1, (w - window) / stride + 1))
            }
            Layer::Relu => Ok((c, h, w)),
            Layer::Dropout { rate } => {
                ensure!(
                    (0.0..1.0).contains(&rate),
                    Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)"))
                );
                Ok((c, h, w))
            }
            Layer::FullyConnected { out_units } => {
                ensure!(
                    out_units > 0,
                    Error::InvalidArgument(format!("{self}: zero-sized parameter"))
                );
                Ok((out_units, 1, 1))
            }
            Layer::Softmax { classes } => {
                ensure!(
                    c * h * w == classes && classes >= 2,
                    shape_err(format!("{} inputs for {classes} classes", c * h * w))
                );
                Ok((classes, 1, 1))
            }
        }
    }

    /// (weight count, bias count, fan-in) for a layer with the given input.
    pub fn param_counts(&self, (c, h, w): Shape) -> Option<(usize, usize, usize)> {
        match *self {
            Layer::Conv {
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = c * kernel * kernel;
                Some((out_channels * fan_in, out_channels, fan_in))
            }
            Layer::FullyConnected { out_units } => {
                let fan_in = c * h * w;
                Some((out_units * fan_in, out_units, fan_in))
            }
            _ => None,
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(f, "conv({out_channels},{kernel},{stride},{pad})"),
            Layer::MaxPool { window, stride } => write!(f, "pool({window},{stride})"),
            Layer::Relu => write!(f, "relu"),
            Layer::FullyConnected { out_units } => write!(f, "fc({out_units})"),
            Layer::Dropout { rate } => write!(f, "dropout({rate:?})"),
            Layer::Softmax { classes } => write!(f, "softmax({classes})"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("malformed layer `{s}`"));
        let (name, args) = match s.find('(') {
            Some(open) => {
                let inner = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
                (&s[..open], inner.split(',').map(str::trim).collect::<Vec<_>>())
            }
            None => (s, Vec::new()),
        };
        let ints = |n: usize| -> Result<Vec<usize>> {
            ensure!(args.len() == n, bad());
            args.iter().map(|a| a.parse().map_err(|_| bad())).collect()
        };
        Ok(match name {
            "conv" => {
                let v = ints(4)?;
                Layer::Conv {
                    out_channels: v[0],
                    kernel: v[1],
                    stride: v[2],
                    pad: v[3],
                }
            }
            "pool" => {
                let v = ints(2)?;
                Layer::MaxPool {
                    window: v[0],
                    stride: v[1],
                }
            }
            "relu" => {
                ints(0)?;
                Layer::Relu
            }
            "fc" => Layer::FullyConnected {
                out_units: ints(1)?[0],
            },
            "dropout" => {
                ensure!(args.len() == 1, bad());
                Layer::Dropout {
                    rate: args[0].parse().map_err(|_| bad())?,
                }
            }
            "softmax" => Layer::Softmax {
                classes: ints(1)?[0],
            },
            _ => return Err(bad()),
        })
    }
}

/// Ordered layer list for a fixed single-sample input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    input: Shape,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
}

impl NetworkSpec {
    /// Full classifier: five convolutional layers, two-way softmax output.
    pub fn new(input: Shape, layers: Vec<Layer>) -> Result<Self> {
        let spec = Self::custom(input, layers)?;
        let convs = spec
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. }))
            .count();
        ensure!(
            convs == 5,
            Error::InvalidArgument(format!("expected five convolutional layers, found {convs}"))
        );
        ensure!(
            spec.layers.last() == Some(&Layer::Softmax { classes: 2 }),
            Error::InvalidArgument("network must end in a two-way softmax".into())
        );
        Ok(spec)
    }

    /// Any layer list whose shapes chain; softmax may only come last. Used
    /// for reduced networks in experiments and checks.
    pub fn custom(input: Shape, layers: Vec<Layer>) -> Result<Self> {
        ensure!(
            input.0 > 0 && input.1 > 0 && input.2 > 0,
            Error::InvalidArgument(format!("empty input shape {input:?}"))
        );
        ensure!(!layers.is_empty(), Error::InvalidArgument("no layers".into()));
        let mut shapes = vec![input];
        for (i, layer) in layers.iter().enumerate() {
            ensure!(
                !matches!(layer, Layer::Softmax { .. }) || i + 1 == layers.len(),
                Error::InvalidArgument("softmax must be the last layer".into())
            );
            shapes.push(layer.output_shape(*shapes.last().unwrap())?);
        }
        Ok(Self {
            input,
            layers,
            shapes,
        })
    }

    /// 64×64 input; conv 32-32-64-64-96 with four 2×2 poolings, fc 256,
    /// dropout 0.5, two-way softmax.
    pub fn default_64() -> Self {
        use Layer::*;
        Self::new(
            (1, 64, 64),
            vec![
                Layer::conv(32, 5),
                Relu,
                Layer::pool(2),
                Layer::conv(32, 5),
                Relu,
                Layer::pool(2),
                Layer::conv(64, 3),
                Relu,
                Layer::conv(64, 3),
                Relu,
                Layer::pool(2),
                Layer::conv(96, 3),
                Relu,
                Layer::pool(2),
                Layer::fc(256),
                Relu,
                Dropout { rate: 0.5 },
                Layer::fc(2),
                Softmax { classes: 2 },
            ],
        )
        .expect("default architecture chains")
    }

    /// Same topology at 32×32 input with fewer filters (8-16-16-16-32, fc 64)
    /// for single-core training budgets.
    pub fn compact_32() -> Self {
        use Layer::*;
        Self::new(
            (1, 32, 32),
            vec![
                Layer::conv(8, 5),
                Relu,
                Layer::pool(2),
                Layer::conv(16, 5),
                Relu,
                Layer::pool(2),
                Layer::conv(16, 3),
                Relu,
                Layer::conv(16, 3),
                Relu,
                Layer::pool(2),
                Layer::conv(32, 3),
                Relu,
                Layer::pool(2),
                Layer::fc(64),
                Relu,
                Dropout { rate: 0.5 },
                Layer::fc(2),
                Softmax { classes: 2 },
            ],
        )
        .expect("compact architecture chains")
    }

    pub fn input(&self) -> Shape {
        self.input
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Input shape of layer `i`; index `layers().len()` gives the output.
    pub fn shape_at(&self, i: usize) -> Shape {
        self.shapes[i]
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().unwrap()
    }

    pub fn output_len(&self) -> usize {
        let (c, h, w) = self.output_shape();
        c * h * w
    }

    pub fn ends_in_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Softmax { .. }))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.param_counts(self.shapes[i]))
            .map(|(w, b, _)| w + b)
            .sum()
    }

    /// Copy with every dropout rate replaced.
    pub fn with_dropout(&self, rate: f64) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dropout { .. } => Layer::Dropout { rate },
                other => *other,
            })
            .collect();
        Self::custom(self.input, layers)
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_string().as_bytes()).into()
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (c, h, w) = self.input;
        write!(f, "input({c},{h},{w})")?;
        for l in &self.layers {
            write!(f, ";{l}")?;
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    /// Parses the `Display` form. The result is checked with `custom`; use
    /// `NetworkSpec::new` on the parts to enforce the full classifier shape.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(';').map(str::trim).filter(|p| !p.is_empty());
        let head = parts
            .next()
            .ok_or_else(|| Error::Config("empty network description".into()))?;
        let dims = head
            .strip_prefix("input(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::Config(format!("expected input(c,h,w), found `{head}`")))?;
        let dims: Vec<usize> = dims
            .split(',')
            .map(|d| d.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("malformed input shape `{head}`")))?;
        ensure!(
            dims.len() == 3,
            Error::Config(format!("malformed input shape `{head}`"))
        );
        let layers = parts.map(str::parse).collect::<Result<Vec<Layer>>>()?;
        Self::custom((dims[0], dims[1], dims[2]), layers)
    }
}
