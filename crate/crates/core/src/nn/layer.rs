use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

/// Channel count and spatial extent of the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn window(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub(crate) fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    SparseConv(ConvSpec),
    Conv(ConvSpec),
    Relu,
    MaxPool { size: usize },
    Flatten,
    Dense { inputs: usize, outputs: usize },
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::SparseConv(_) => "sparse_conv",
            LayerKind::Conv(_) => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::SparseConv(c) | LayerKind::Conv(c) => {
                vec![c.out_channels, c.in_channels, c.kernel, c.kernel]
            }
            LayerKind::Dense { inputs, outputs } => vec![outputs, inputs],
            _ => Vec::new(),
        }
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::SparseConv(c) | LayerKind::Conv(c) => vec![c.out_channels],
            LayerKind::Dense { outputs, .. } => vec![outputs],
            _ => Vec::new(),
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            LayerKind::SparseConv(_) | LayerKind::Conv(_) | LayerKind::Dense { .. }
        )
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::SparseConv(c) | LayerKind::Conv(c) => c.window(),
            LayerKind::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }
}

pub(crate) fn shape_len(shape: &[usize]) -> usize {
    if shape.is_empty() {
        0
    } else {
        shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub kind: LayerKind,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Activation extent between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Dims {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Dims {
    pub(crate) fn per_sample(&self) -> usize {
        match *self {
            Dims::Spatial { c, h, w } => c * h * w,
            Dims::Flat(f) => f,
        }
    }
}

/// Layer list and weights of a classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub input: InputShape,
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Builds a model with He-uniform weights and zero biases.
    pub fn initialize<R: Rng>(input: InputShape, kinds: &[LayerKind], rng: &mut R) -> Result<Self> {
        let layers = kinds
            .iter()
            .map(|&kind| {
                let n = shape_len(&kind.weight_shape());
                let bound = if n > 0 {
                    (6.0 / kind.fan_in() as f64).sqrt()
                } else {
                    0.0
                };
                Layer {
                    kind,
                    weight: (0..n)
                        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
                        .collect(),
                    bias: vec![T::zero(); shape_len(&kind.bias_shape())],
                }
            })
            .collect();
        let params = ModelParams { input, layers };
        params.validate()?;
        Ok(params)
    }

    /// sparse-conv 3x3x32, relu, maxpool 2, conv 3x3x64, relu, maxpool 2,
    /// dense 128, relu, dense K, softmax.
    pub fn desk_cnn<R: Rng>(input: InputShape, classes: usize, rng: &mut R) -> Result<Self> {
        let conv = |i, o| ConvSpec {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let flat = 64 * (input.height / 4) * (input.width / 4);
        let kinds = [
            LayerKind::SparseConv(conv(input.channels, 32)),
            LayerKind::Relu,
            LayerKind::MaxPool { size: 2 },
            LayerKind::Conv(conv(32, 64)),
            LayerKind::Relu,
            LayerKind::MaxPool { size: 2 },
            LayerKind::Flatten,
            LayerKind::Dense {
                inputs: flat,
                outputs: 128,
            },
            LayerKind::Relu,
            LayerKind::Dense {
                inputs: 128,
                outputs: classes,
            },
            LayerKind::Softmax,
        ];
        Self::initialize(input, &kinds, rng)
    }

    /// Checks layer compatibility and returns the class count.
    pub fn validate(&self) -> Result<usize> {
        let bad = |i: usize, msg: String| Error::ShapeMismatch(format!("layer {i}: {msg}"));
        let mut dims = Dims::Spatial {
            c: self.input.channels,
            h: self.input.height,
            w: self.input.width,
        };
        if self.layers.is_empty() {
            return Err(Error::ShapeMismatch("model has no layers".into()));
        }
        let first_weighted = self.layers.iter().position(|l| l.kind.is_weighted());
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weight.len() != shape_len(&layer.kind.weight_shape())
                || layer.bias.len() != shape_len(&layer.kind.bias_shape())
            {
                return Err(bad(i, "parameter length does not match layer shape".into()));
            }
            dims = match (layer.kind, dims) {
                (LayerKind::SparseConv(spec), Dims::Spatial { c, h, w })
                | (LayerKind::Conv(spec), Dims::Spatial { c, h, w }) => {
                    if matches!(layer.kind, LayerKind::SparseConv(_)) && first_weighted != Some(i) {
                        return Err(bad(i, "only the first weighted layer may be sparse".into()));
                    }
                    if spec.in_channels != c {
                        return Err(bad(i, format!("expects {} channels, got {c}", spec.in_channels)));
                    }
                    let (oh, ow) = spec
                        .output_extent(h, w)
                        .ok_or_else(|| bad(i, format!("kernel does not fit {h}x{w}")))?;
                    Dims::Spatial {
                        c: spec.out_channels,
                        h: oh,
                        w: ow,
                    }
                }
                (LayerKind::Relu, d) => d,
                (LayerKind::MaxPool { size }, Dims::Spatial { c, h, w }) => {
                    if size == 0 || h < size || w < size {
                        return Err(bad(i, format!("pool {size} does not fit {h}x{w}")));
                    }
                    Dims::Spatial {
                        c,
                        h: h / size,
                        w: w / size,
                    }
                }
                (LayerKind::Flatten, d) => Dims::Flat(d.per_sample()),
                (LayerKind::Dense { inputs, outputs }, Dims::Flat(f)) => {
                    if inputs != f {
                        return Err(bad(i, format!("expects {inputs} features, got {f}")));
                    }
                    Dims::Flat(outputs)
                }
                (LayerKind::Softmax, Dims::Flat(f)) => {
                    if i + 1 != self.layers.len() {
                        return Err(bad(i, "softmax must be last".into()));
                    }
                    Dims::Flat(f)
                }
                (kind, d) => {
                    return Err(bad(i, format!("{} cannot follow {d:?}", kind.name())));
                }
            };
        }
        match (self.layers.last().map(|l| l.kind), dims) {
            (Some(LayerKind::Softmax), Dims::Flat(k)) if k > 0 => Ok(k),
            _ => Err(Error::ShapeMismatch("last layer must be softmax".into())),
        }
    }

    pub fn classes(&self) -> usize {
        self.validate().expect("validated model")
    }

    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |v: &[T]| -> Vec<U> {
            v.iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero))
                .collect()
        };
        ModelParams {
            input: self.input,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    kind: l.kind,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                })
                .collect(),
        }
    }

    pub(crate) fn uses_mask(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.kind, LayerKind::SparseConv(_)))
    }
}
