//! Central-difference gradient checks on small f64 models.

use std::fmt;

use occvote::nn::{loss_and_gradients, BatchInput, ConvSpec, InputShape, LayerKind, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 8;

pub fn conv(i: usize, o: usize, k: usize, stride: usize, padding: usize) -> ConvSpec {
    ConvSpec {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride,
        padding,
    }
}

/// 8x8 toy model touching every layer kind.
pub fn toy_model(seed: u64, channels: usize) -> ModelParams<f64> {
    let kinds = [
        LayerKind::SparseConv(conv(channels, 3, 3, 1, 1)),
        LayerKind::Relu,
        LayerKind::MaxPool { size: 2 },
        LayerKind::Conv(conv(3, 4, 3, 1, 1)),
        LayerKind::Relu,
        LayerKind::Conv(conv(4, 2, 2, 2, 0)),
        LayerKind::Flatten,
        LayerKind::Dense {
            inputs: 8,
            outputs: 6,
        },
        LayerKind::Relu,
        LayerKind::Dense {
            inputs: 6,
            outputs: 4,
        },
        LayerKind::Softmax,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ModelParams::<f64>::initialize(
        InputShape {
            channels,
            height: SIDE,
            width: SIDE,
        },
        &kinds,
        &mut rng,
    )
    .unwrap();
    for l in &mut m.layers {
        for b in &mut l.bias {
            *b = rng.gen_range(-0.1..0.1);
        }
    }
    m
}

pub fn random_batch(seed: u64, batch: usize, channels: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..batch * channels * SIDE * SIDE)
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    let mut masks = vec![1.0; batch * SIDE * SIDE];
    for b in 0..batch {
        let (y0, x0) = (rng.gen_range(0..5), rng.gen_range(0..5));
        for y in y0..y0 + 3 {
            for x in x0..x0 + 3 {
                masks[b * SIDE * SIDE + y * SIDE + x] = 0.0;
            }
        }
    }
    let labels = (0..batch).map(|_| rng.gen_range(0..4)).collect();
    (pixels, masks, labels)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

pub fn batch_loss(m: &ModelParams<f64>, px: &[f64], mk: &[f64], labels: &[usize]) -> f64 {
    loss_and_gradients(
        m,
        BatchInput {
            pixels: px,
            masks: mk,
            batch: labels.len(),
        },
        labels,
    )
    .unwrap()
    .0
}

pub struct GradientError {
    pub error: f64,
    pub layer: usize,
    pub kind: &'static str,
    pub bias: bool,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl fmt::Display for GradientError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "worst relative error {:.2e} at layer {} ({}) {}[{}]: analytic {} numeric {}",
            self.error,
            self.layer,
            self.kind,
            if self.bias { "bias" } else { "weight" },
            self.index,
            self.analytic,
            self.numeric
        )
    }
}

/// Finite-difference step. Larger steps cross ReLU and max-pool switch
/// points on these piecewise-linear models.
pub const STEP: f64 = 1e-6;

/// Compares every weight and bias gradient of the toy model against central
/// differences and returns the worst relative error.
pub fn worst_parameter_gradient_error(seed: u64, channels: usize) -> GradientError {
    let model = toy_model(seed, channels);
    let (px, mk, labels) = random_batch(seed + 100, 3, channels);
    let (_, grads) = loss_and_gradients(
        &model,
        BatchInput {
            pixels: &px,
            masks: &mk,
            batch: 3,
        },
        &labels,
    )
    .unwrap();
    let mut worst = GradientError {
        error: 0.0,
        layer: 0,
        kind: "",
        bias: false,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (li, layer) in model.layers.iter().enumerate() {
        assert_eq!(grads.layers[li].0.len(), layer.weight.len());
        assert_eq!(grads.layers[li].1.len(), layer.bias.len());
        for bias in [false, true] {
            let n = if bias { layer.bias.len() } else { layer.weight.len() };
            for idx in 0..n {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let (p, q) = if bias {
                    (&mut plus.layers[li].bias[idx], &mut minus.layers[li].bias[idx])
                } else {
                    (&mut plus.layers[li].weight[idx], &mut minus.layers[li].weight[idx])
                };
                *p += STEP;
                *q -= STEP;
                let numeric =
                    (batch_loss(&plus, &px, &mk, &labels) - batch_loss(&minus, &px, &mk, &labels)) / (2.0 * STEP);
                let analytic = if bias { grads.layers[li].1[idx] } else { grads.layers[li].0[idx] };
                let e = rel_err(analytic, numeric);
                if e >= worst.error {
                    worst = GradientError {
                        error: e,
                        layer: li,
                        kind: layer.kind.name(),
                        bias,
                        index: idx,
                        analytic,
                        numeric,
                    };
                }
            }
        }
    }
    worst
}
