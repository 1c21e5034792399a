//! Batched forward and backward passes.
//!
//! Spatial activations are kept channel-major across the batch
//! (`[channel][sample][row][col]`) so a convolution is a single GEMM over an
//! im2col buffer whose columns enumerate `(sample, row, col)`. Flat
//! activations are `[sample][feature]`.

use super::layer::{Dims, LayerKind, ModelParams};
use super::{gemm, ConvSpec, Order, Real};
use crate::error::{Error, Result};

/// Added to the visible-pixel count before dividing in sparse convolutions.
pub const SPARSE_EPSILON: f64 = 1e-8;

/// A batch of images in per-sample `[channel][row][col]` order plus one
/// `[row][col]` mask per sample (1 = visible, 0 = occluded).
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a, T> {
    pub pixels: &'a [T],
    pub masks: &'a [T],
    pub batch: usize,
}

/// Parameter gradients, one `(weight, bias)` pair per layer (empty for
/// parameter-free layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

enum Cache<T> {
    Conv {
        cols: Vec<T>,
        norm: Option<Vec<T>>,
        masks: Option<Vec<T>>,
        in_dims: (usize, usize, usize),
        out_hw: (usize, usize),
    },
    Relu {
        out: Vec<T>,
    },
    Pool {
        argmax: Vec<u32>,
        in_len: usize,
    },
    Flatten {
        in_dims: Dims,
    },
    Dense {
        input: Vec<T>,
    },
    Softmax,
}

struct Trace<T> {
    caches: Vec<Cache<T>>,
    probs: Vec<T>,
}

fn to_channel_major<T: Real>(pixels: &[T], batch: usize, c: usize, hw: usize) -> Vec<T> {
    if c == 1 || batch == 1 {
        return pixels.to_vec();
    }
    let mut out = vec![T::zero(); pixels.len()];
    for b in 0..batch {
        for ch in 0..c {
            let src = &pixels[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            out[(ch * batch + b) * hw..(ch * batch + b + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

fn from_channel_major<T: Real>(data: &[T], batch: usize, c: usize, hw: usize) -> Vec<T> {
    if c == 1 || batch == 1 {
        return data.to_vec();
    }
    let mut out = vec![T::zero(); data.len()];
    for b in 0..batch {
        for ch in 0..c {
            let src = &data[(ch * batch + b) * hw..(ch * batch + b + 1) * hw];
            out[(b * c + ch) * hw..(b * c + ch + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// Valid output columns `[lo, hi)` for kernel offset `k` along one axis.
fn valid_range(offset: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // input index = o * stride + offset - pad must lie in [0, in_len)
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    let hi = if in_len + pad > offset {
        ((in_len + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    masks: Option<&[T]>,
    batch: usize,
    (c, h, w): (usize, usize, usize),
    spec: &ConvSpec,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding;
    let n = batch * oh * ow;
    let mut cols = vec![T::zero(); c * k * k * n];
    for ch in 0..c {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, p, s, h, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, p, s, w, ow);
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for b in 0..batch {
                    let plane = &x[(ch * batch + b) * h * w..(ch * batch + b + 1) * h * w];
                    let mplane = masks.map(|m| &m[b * h * w..(b + 1) * h * w]);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let base = (b * oh + oy) * ow;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * s + kx - p;
                            let v = plane[iy * w + ix];
                            dst[base + ox] = match mplane {
                                Some(m) => v * m[iy * w + ix],
                                None => v,
                            };
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    batch: usize,
    (c, h, w): (usize, usize, usize),
    spec: &ConvSpec,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding;
    let n = batch * oh * ow;
    let mut x = vec![T::zero(); c * batch * h * w];
    for ch in 0..c {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, p, s, h, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, p, s, w, ow);
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for b in 0..batch {
                    let plane = &mut x[(ch * batch + b) * h * w..(ch * batch + b + 1) * h * w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let base = (b * oh + oy) * ow;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * s + kx - p;
                            plane[iy * w + ix] = plane[iy * w + ix] + src[base + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `Kn / (visible + eps)` per output position; padding counts as visible.
fn sparse_normalizer<T: Real>(
    masks: &[T],
    batch: usize,
    (h, w): (usize, usize),
    spec: &ConvSpec,
    (oh, ow): (usize, usize),
    eps: T,
) -> Vec<T> {
    let k = spec.kernel;
    let kn = T::lit((k * k) as f64);
    let mut norm = Vec::with_capacity(batch * oh * ow);
    for b in 0..batch {
        let m = &masks[b * h * w..(b + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut visible = T::zero();
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        visible = visible
                            + if inside {
                                m[iy as usize * w + ix as usize]
                            } else {
                                T::one()
                            };
                    }
                }
                norm.push(kn / (visible + eps));
            }
        }
    }
    norm
}

impl<T: Real> ModelParams<T> {
    fn check_input(&self, input: &BatchInput<'_, T>) -> Result<()> {
        let per = self.input.pixels();
        if input.batch == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        if input.pixels.len() != per * input.batch {
            return Err(Error::ShapeMismatch(format!(
                "expected {} pixel values for {} samples of {}x{}x{}, got {}",
                per * input.batch,
                input.batch,
                self.input.channels,
                self.input.height,
                self.input.width,
                input.pixels.len()
            )));
        }
        let plane = self.input.height * self.input.width;
        if self.uses_mask() && input.masks.len() != plane * input.batch {
            return Err(Error::ShapeMismatch(format!(
                "expected {} mask values, got {}",
                plane * input.batch,
                input.masks.len()
            )));
        }
        Ok(())
    }

    fn run(&self, input: &BatchInput<'_, T>, keep: bool) -> Result<Trace<T>> {
        self.check_input(input)?;
        let batch = input.batch;
        let mut dims = Dims::Spatial {
            c: self.input.channels,
            h: self.input.height,
            w: self.input.width,
        };
        let mut act = to_channel_major(
            input.pixels,
            batch,
            self.input.channels,
            self.input.height * self.input.width,
        );
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for layer in &self.layers {
            let (next, next_dims, cache) = match (layer.kind, dims) {
                (LayerKind::SparseConv(spec), Dims::Spatial { c, h, w })
                | (LayerKind::Conv(spec), Dims::Spatial { c, h, w }) => {
                    let sparse = matches!(layer.kind, LayerKind::SparseConv(_));
                    let (oh, ow) = spec.output_extent(h, w).expect("validated");
                    let masks = sparse.then_some(input.masks);
                    let cols = im2col(&act, masks, batch, (c, h, w), &spec, (oh, ow));
                    let n = batch * oh * ow;
                    let mut out = vec![T::zero(); spec.out_channels * n];
                    gemm(
                        spec.out_channels,
                        spec.window(),
                        n,
                        &layer.weight,
                        Order::Plain,
                        &cols,
                        Order::Plain,
                        T::zero(),
                        &mut out,
                    );
                    let norm = masks.map(|m| sparse_normalizer(m, batch, (h, w), &spec, (oh, ow), T::lit(SPARSE_EPSILON)));
                    for (o, row) in out.chunks_mut(n).enumerate() {
                        let bias = layer.bias[o];
                        match &norm {
                            Some(norm) => {
                                for (v, &f) in row.iter_mut().zip(norm) {
                                    *v = *v * f + bias;
                                }
                            }
                            None => {
                                for v in row.iter_mut() {
                                    *v = *v + bias;
                                }
                            }
                        }
                    }
                    let cache = keep.then(|| Cache::Conv {
                        cols,
                        norm,
                        masks: masks.map(|m| m.to_vec()),
                        in_dims: (c, h, w),
                        out_hw: (oh, ow),
                    });
                    (
                        out,
                        Dims::Spatial {
                            c: spec.out_channels,
                            h: oh,
                            w: ow,
                        },
                        cache,
                    )
                }
                (LayerKind::Relu, d) => {
                    let out: Vec<T> = act.iter().map(|&v| v.max(T::zero())).collect();
                    let cache = keep.then(|| Cache::Relu { out: out.clone() });
                    (out, d, cache)
                }
                (LayerKind::MaxPool { size }, Dims::Spatial { c, h, w }) => {
                    let (oh, ow) = (h / size, w / size);
                    let planes = c * batch;
                    let mut out = Vec::with_capacity(planes * oh * ow);
                    let mut argmax = Vec::with_capacity(if keep { planes * oh * ow } else { 0 });
                    for pl in 0..planes {
                        let plane = &act[pl * h * w..(pl + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = oy * size * w + ox * size;
                                for dy in 0..size {
                                    for dx in 0..size {
                                        let idx = (oy * size + dy) * w + ox * size + dx;
                                        if plane[idx] > plane[best] {
                                            best = idx;
                                        }
                                    }
                                }
                                out.push(plane[best]);
                                if keep {
                                    argmax.push((pl * h * w + best) as u32);
                                }
                            }
                        }
                    }
                    let cache = keep.then_some(Cache::Pool {
                        argmax,
                        in_len: act.len(),
                    });
                    (out, Dims::Spatial { c, h: oh, w: ow }, cache)
                }
                (LayerKind::Flatten, d) => {
                    let out = match d {
                        Dims::Spatial { c, h, w } => from_channel_major(&act, batch, c, h * w),
                        Dims::Flat(_) => act.clone(),
                    };
                    (out, Dims::Flat(d.per_sample()), keep.then_some(Cache::Flatten { in_dims: d }))
                }
                (LayerKind::Dense { inputs, outputs }, Dims::Flat(_)) => {
                    let mut out = Vec::with_capacity(batch * outputs);
                    for _ in 0..batch {
                        out.extend_from_slice(&layer.bias);
                    }
                    gemm(
                        batch,
                        inputs,
                        outputs,
                        &act,
                        Order::Plain,
                        &layer.weight,
                        Order::Transposed,
                        T::one(),
                        &mut out,
                    );
                    let cache = keep.then(|| Cache::Dense {
                        input: std::mem::take(&mut act),
                    });
                    (out, Dims::Flat(outputs), cache)
                }
                (LayerKind::Softmax, Dims::Flat(k)) => {
                    let mut out = act.clone();
                    for row in out.chunks_mut(k) {
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for v in row.iter_mut() {
                            *v = (*v - max).exp();
                            sum = sum + *v;
                        }
                        for v in row.iter_mut() {
                            *v = *v / sum;
                        }
                    }
                    (out, Dims::Flat(k), keep.then_some(Cache::Softmax))
                }
                (kind, d) => {
                    return Err(Error::ShapeMismatch(format!(
                        "{} cannot follow {d:?}",
                        kind.name()
                    )))
                }
            };
            act = next;
            dims = next_dims;
            if let Some(cache) = cache {
                caches.push(cache);
            }
        }
        Ok(Trace { caches, probs: act })
    }

    /// Softmax probabilities for a batch, `[sample][class]`.
    pub fn predict_batch(&self, input: BatchInput<'_, T>) -> Result<Vec<T>> {
        Ok(self.run(&input, false)?.probs)
    }

    /// Class confidences for one image and its mask.
    pub fn forward(&self, image: &[T], mask: &[T]) -> Result<Vec<T>> {
        self.predict_batch(BatchInput {
            pixels: image,
            masks: mask,
            batch: 1,
        })
    }

    /// Backpropagates `d_logits` (gradient at the softmax input).
    fn backward(
        &self,
        trace: Trace<T>,
        mut grad: Vec<T>,
        batch: usize,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Gradients<T>>, Option<Vec<T>>) {
        let mut param_grads: Vec<(Vec<T>, Vec<T>)> = vec![(Vec::new(), Vec::new()); self.layers.len()];
        let mut caches = trace.caches;
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let cache = caches.pop().expect("one cache per layer");
            let need_dx = idx > 0 || want_input;
            grad = match (layer.kind, cache) {
                (LayerKind::Softmax, Cache::Softmax) => grad,
                (LayerKind::Dense { inputs, outputs }, Cache::Dense { input }) => {
                    if want_params {
                        let mut dw = vec![T::zero(); outputs * inputs];
                        gemm(
                            outputs,
                            batch,
                            inputs,
                            &grad,
                            Order::Transposed,
                            &input,
                            Order::Plain,
                            T::zero(),
                            &mut dw,
                        );
                        let mut db = vec![T::zero(); outputs];
                        for row in grad.chunks(outputs) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d = *d + g;
                            }
                        }
                        param_grads[idx] = (dw, db);
                    }
                    if need_dx {
                        let mut dx = vec![T::zero(); batch * inputs];
                        gemm(
                            batch,
                            outputs,
                            inputs,
                            &grad,
                            Order::Plain,
                            &layer.weight,
                            Order::Plain,
                            T::zero(),
                            &mut dx,
                        );
                        dx
                    } else {
                        Vec::new()
                    }
                }
                (LayerKind::Relu, Cache::Relu { out }) => grad
                    .iter()
                    .zip(&out)
                    .map(|(&g, &o)| if o > T::zero() { g } else { T::zero() })
                    .collect(),
                (LayerKind::MaxPool { .. }, Cache::Pool { argmax, in_len }) => {
                    let mut dx = vec![T::zero(); in_len];
                    for (&g, &i) in grad.iter().zip(&argmax) {
                        dx[i as usize] = dx[i as usize] + g;
                    }
                    dx
                }
                (LayerKind::Flatten, Cache::Flatten { in_dims }) => match in_dims {
                    Dims::Spatial { c, h, w } => {
                        // inverse of the [c][b] -> [b][c] transpose
                        let mut out = vec![T::zero(); grad.len()];
                        let hw = h * w;
                        for b in 0..batch {
                            for ch in 0..c {
                                out[(ch * batch + b) * hw..(ch * batch + b + 1) * hw]
                                    .copy_from_slice(&grad[(b * c + ch) * hw..(b * c + ch + 1) * hw]);
                            }
                        }
                        out
                    }
                    Dims::Flat(_) => grad,
                },
                (
                    LayerKind::SparseConv(spec) | LayerKind::Conv(spec),
                    Cache::Conv {
                        cols,
                        norm,
                        masks,
                        in_dims,
                        out_hw,
                    },
                ) => {
                    let n = batch * out_hw.0 * out_hw.1;
                    let oc = spec.out_channels;
                    if want_params {
                        let mut db = vec![T::zero(); oc];
                        for (d, row) in db.iter_mut().zip(grad.chunks(n)) {
                            *d = row.iter().copied().sum();
                        }
                        param_grads[idx].1 = db;
                    }
                    if let Some(norm) = &norm {
                        for row in grad.chunks_mut(n) {
                            for (g, &f) in row.iter_mut().zip(norm) {
                                *g = *g * f;
                            }
                        }
                    }
                    if want_params {
                        let mut dw = vec![T::zero(); oc * spec.window()];
                        gemm(
                            oc,
                            n,
                            spec.window(),
                            &grad,
                            Order::Plain,
                            &cols,
                            Order::Transposed,
                            T::zero(),
                            &mut dw,
                        );
                        param_grads[idx].0 = dw;
                    }
                    if need_dx {
                        let mut dcols = vec![T::zero(); spec.window() * n];
                        gemm(
                            spec.window(),
                            oc,
                            n,
                            &layer.weight,
                            Order::Transposed,
                            &grad,
                            Order::Plain,
                            T::zero(),
                            &mut dcols,
                        );
                        let mut dx = col2im(&dcols, batch, in_dims, &spec, out_hw);
                        if let Some(m) = &masks {
                            let (c, h, w) = in_dims;
                            let hw = h * w;
                            for ch in 0..c {
                                for b in 0..batch {
                                    let plane = &mut dx[(ch * batch + b) * hw..(ch * batch + b + 1) * hw];
                                    for (v, &mv) in plane.iter_mut().zip(&m[b * hw..(b + 1) * hw]) {
                                        *v = *v * mv;
                                    }
                                }
                            }
                        }
                        dx
                    } else {
                        Vec::new()
                    }
                }
                _ => unreachable!("cache kind matches layer kind"),
            };
        }
        let input_grad = want_input.then(|| {
            from_channel_major(
                &grad,
                batch,
                self.input.channels,
                self.input.height * self.input.width,
            )
        });
        (want_params.then_some(Gradients { layers: param_grads }), input_grad)
    }

    /// Probabilities plus `d(-log p_target)/d(pixels)` for every sample.
    ///
    /// Each sample's gradient is that of its own loss (no batch averaging).
    pub fn input_gradients_batch(
        &self,
        input: BatchInput<'_, T>,
        targets: &[usize],
    ) -> Result<(Vec<T>, Vec<T>)> {
        let classes = self.validate()?;
        check_labels(targets, input.batch, classes)?;
        let trace = self.run(&input, true)?;
        let probs = trace.probs.clone();
        let seed = logit_gradient(&probs, targets, classes, T::one());
        let (_, dx) = self.backward(trace, seed, input.batch, false, true);
        Ok((probs, dx.expect("input gradient requested")))
    }

    /// `d(-log softmax_target)/d(pixels)`, shaped like the image.
    pub fn input_gradient(&self, image: &[T], mask: &[T], target: usize) -> Result<Vec<T>> {
        let (_, dx) = self.input_gradients_batch(
            BatchInput {
                pixels: image,
                masks: mask,
                batch: 1,
            },
            &[target],
        )?;
        Ok(dx)
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn logit_gradient<T: Real>(probs: &[T], labels: &[usize], classes: usize, scale: T) -> Vec<T> {
    let mut g = probs.to_vec();
    for (row, &label) in g.chunks_mut(classes).zip(labels) {
        row[label] = row[label] - T::one();
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    g
}

/// Batch-mean cross-entropy and its gradient for every parameter.
pub fn loss_and_gradients<T: Real>(
    params: &ModelParams<T>,
    input: BatchInput<'_, T>,
    labels: &[usize],
) -> Result<(T, Gradients<T>)> {
    let classes = params.validate()?;
    if input.batch == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    check_labels(labels, input.batch, classes)?;
    let trace = params.run(&input, true)?;
    let scale = T::one() / T::lit(input.batch as f64);
    let loss = trace
        .probs
        .chunks(classes)
        .zip(labels)
        .map(|(row, &l)| -row[l].max(T::min_positive_value()).ln())
        .sum::<T>()
        * scale;
    let seed = logit_gradient(&trace.probs, labels, classes, scale);
    let (grads, _) = params.backward(trace, seed, input.batch, true, false);
    Ok((loss, grads.expect("parameter gradients requested")))
}

fn single_conv<T: Real>(
    input: &[T],
    mask: Option<&[T]>,
    (h, w): (usize, usize),
    spec: &ConvSpec,
    weight: &[T],
    bias: &[T],
    epsilon: T,
) -> Result<Vec<T>> {
    if input.len() != spec.in_channels * h * w {
        return Err(Error::ShapeMismatch(format!(
            "input has {} values, expected {}",
            input.len(),
            spec.in_channels * h * w
        )));
    }
    if mask.is_some_and(|m| m.len() != h * w) {
        return Err(Error::ShapeMismatch("mask extent differs from input".into()));
    }
    if weight.len() != spec.out_channels * spec.window() || bias.len() != spec.out_channels {
        return Err(Error::ShapeMismatch("weight or bias shape".into()));
    }
    let (oh, ow) = spec
        .output_extent(h, w)
        .ok_or_else(|| Error::ShapeMismatch("kernel larger than input".into()))?;
    let cols = im2col(input, mask, 1, (spec.in_channels, h, w), spec, (oh, ow));
    let n = oh * ow;
    let mut out = vec![T::zero(); spec.out_channels * n];
    gemm(
        spec.out_channels,
        spec.window(),
        n,
        weight,
        Order::Plain,
        &cols,
        Order::Plain,
        T::zero(),
        &mut out,
    );
    let norm = mask.map(|m| sparse_normalizer(m, 1, (h, w), spec, (oh, ow), epsilon));
    for (o, row) in out.chunks_mut(n).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let scaled = match &norm {
                Some(norm) => *v * norm[j],
                None => *v,
            };
            *v = scaled + bias[o];
        }
    }
    Ok(out)
}

/// Sparsity-invariant convolution of one `[channel][row][col]` input.
///
/// Each output is `(sum w*x*m) * Kn / (sum m + epsilon) + b`, with `Kn` the
/// kernel's pixel count. Zero padding counts as visible.
pub fn sparse_conv_forward<T: Real>(
    input: &[T],
    mask: &[T],
    (h, w): (usize, usize),
    spec: &ConvSpec,
    weight: &[T],
    bias: &[T],
    epsilon: T,
) -> Result<Vec<T>> {
    single_conv(input, Some(mask), (h, w), spec, weight, bias, epsilon)
}

/// Ordinary cross-correlation of one `[channel][row][col]` input.
pub fn conv_forward<T: Real>(
    input: &[T],
    (h, w): (usize, usize),
    spec: &ConvSpec,
    weight: &[T],
    bias: &[T],
) -> Result<Vec<T>> {
    single_conv(input, None, (h, w), spec, weight, bias, T::zero())
}
