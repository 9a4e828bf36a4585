//! Forward and backward passes over a batch.
//!
//! Every layer caches nothing of its own; the forward trace keeps the output
//! of each layer so the backward pass can read the inputs it needs.

use crate::error::{input_err, Result};
use crate::nn::model::{Layer, ModelSpec};
use crate::nn::params::{LayerParams, Parameters};
use crate::tensor::Tensor;

/// Inputs with a leading batch dimension and one class label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() || inputs.shape().first() != Some(&labels.len()) {
            return Err(input_err(format!(
                "batch of {} labels with inputs shaped {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Mean softmax cross-entropy over the batch.
    pub loss: f64,
    pub logits: Tensor,
    /// Output of every layer, batch-leading; the head's entry holds the
    /// softmax probabilities.
    pub outputs: Vec<Tensor>,
    activation_sources: Vec<(usize, usize)>,
}

impl ForwardPass {
    /// Post-nonlinearity output of every hidden Dense/Conv layer, keyed by
    /// the parameterized layer's index.
    pub fn activations(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.activation_sources
            .iter()
            .map(|&(layer, src)| (layer, &self.outputs[src]))
    }

    pub fn probabilities(&self) -> &Tensor {
        self.outputs.last().expect("head output")
    }
}

fn validate(spec: &ModelSpec, params: &Parameters, batch: &Batch) -> Result<()> {
    params.check_matches(spec)?;
    let sample = &batch.inputs.shape()[1..];
    if sample != spec.input_shape() {
        return Err(input_err(format!(
            "model expects samples shaped {:?}, batch has {:?}",
            spec.input_shape(),
            sample
        )));
    }
    let classes = spec.classes();
    if let Some(bad) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(input_err(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

pub fn forward(spec: &ModelSpec, params: &Parameters, batch: &Batch) -> Result<ForwardPass> {
    validate(spec, params, batch)?;
    Ok(forward_unchecked(spec, params, batch))
}

fn forward_unchecked(spec: &ModelSpec, params: &Parameters, batch: &Batch) -> ForwardPass {
    let b = batch.len();
    let in_shapes = spec.input_shapes();
    let out_shapes = spec.output_shapes();
    let layers = spec.layers();
    let mut outputs: Vec<Tensor> = Vec::with_capacity(layers.len());
    let mut loss = 0.0;
    let mut logits = None;
    for (i, layer) in layers.iter().enumerate() {
        let input = if i == 0 { &batch.inputs } else { &outputs[i - 1] };
        let mut out_shape = vec![b];
        out_shape.extend_from_slice(&out_shapes[i]);
        let out = match *layer {
            Layer::Dense { .. } => dense_forward(input, params.get(i).expect("checked")),
            Layer::Conv2d { stride, padding, .. } => conv_forward(
                input,
                &in_shapes[i],
                &out_shapes[i],
                params.get(i).expect("checked"),
                stride,
                padding,
            ),
            Layer::MaxPool2d => maxpool_forward(input, &in_shapes[i], &out_shapes[i]),
            Layer::Relu => input.data().iter().map(|&v| v.max(0.0)).collect(),
            Layer::Flatten => input.data().to_vec(),
            Layer::SoftmaxCrossEntropy { classes } => {
                let (probs, l) = softmax_xent(input.data(), &batch.labels, classes);
                loss = l;
                logits = Some(input.clone());
                probs
            }
        };
        outputs.push(Tensor::new(out_shape, out).expect("layer output sized from shape"));
    }
    ForwardPass {
        loss,
        logits: logits.expect("head present"),
        outputs,
        activation_sources: activation_sources(spec),
    }
}

/// For each prunable layer, the index of the trace entry holding its
/// post-nonlinearity output: the following ReLU if there is one.
fn activation_sources(spec: &ModelSpec) -> Vec<(usize, usize)> {
    let layers = spec.layers();
    spec.prunable_layers()
        .into_iter()
        .map(|i| match layers.get(i + 1) {
            Some(Layer::Relu) => (i, i + 1),
            _ => (i, i),
        })
        .collect()
}

/// Exact gradients of the mean batch loss with respect to every parameter.
pub fn backward(spec: &ModelSpec, params: &Parameters, batch: &Batch) -> Result<Parameters> {
    Ok(forward_backward(spec, params, batch)?.1)
}

pub fn forward_backward(
    spec: &ModelSpec,
    params: &Parameters,
    batch: &Batch,
) -> Result<(ForwardPass, Parameters)> {
    validate(spec, params, batch)?;
    let pass = forward_unchecked(spec, params, batch);
    let grads = backward_from(spec, params, batch, &pass);
    Ok((pass, grads))
}

fn backward_from(
    spec: &ModelSpec,
    params: &Parameters,
    batch: &Batch,
    pass: &ForwardPass,
) -> Parameters {
    let b = batch.len();
    let in_shapes = spec.input_shapes();
    let out_shapes = spec.output_shapes();
    let layers = spec.layers();
    let mut grads = params.zeros_like();
    // gradient with respect to the output of the current layer
    let mut upstream: Vec<f64> = Vec::new();
    for i in (0..layers.len()).rev() {
        let input = if i == 0 {
            batch.inputs.data()
        } else {
            pass.outputs[i - 1].data()
        };
        let need_input_grad = i > 0;
        upstream = match layers[i] {
            Layer::SoftmaxCrossEntropy { classes } => {
                let probs = pass.outputs[i].data();
                let mut g = probs.to_vec();
                let scale = 1.0 / b as f64;
                for (s, &label) in batch.labels.iter().enumerate() {
                    g[s * classes + label] -= 1.0;
                }
                g.iter_mut().for_each(|v| *v *= scale);
                g
            }
            Layer::Dense { .. } => dense_backward(
                input,
                &upstream,
                b,
                params.get(i).expect("checked"),
                grads.get_mut(i).expect("zeros_like"),
                need_input_grad,
            ),
            Layer::Conv2d { stride, padding, .. } => conv_backward(
                input,
                &upstream,
                b,
                &in_shapes[i],
                &out_shapes[i],
                params.get(i).expect("checked"),
                grads.get_mut(i).expect("zeros_like"),
                stride,
                padding,
                need_input_grad,
            ),
            Layer::MaxPool2d => maxpool_backward(input, &upstream, &in_shapes[i], &out_shapes[i]),
            Layer::Relu => input
                .iter()
                .zip(&upstream)
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            Layer::Flatten => upstream,
        };
    }
    grads
}

fn softmax_xent(logits: &[f64], labels: &[usize], classes: usize) -> (Vec<f64>, f64) {
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label];
        for (p, &z) in probs[s * classes..(s + 1) * classes].iter_mut().zip(row) {
            *p = (z - lse).exp();
        }
    }
    (probs, total / labels.len() as f64)
}

fn dense_forward(input: &Tensor, p: &LayerParams) -> Vec<f64> {
    let (out_units, in_units) = (p.weight.shape()[0], p.weight.shape()[1]);
    let w = p.weight.data();
    let bias = p.bias.data();
    let rows = input.len() / in_units;
    let mut out = Vec::with_capacity(rows * out_units);
    for x in input.data().chunks_exact(in_units) {
        for (o, wrow) in w.chunks_exact(in_units).enumerate() {
            let dot: f64 = wrow.iter().zip(x).map(|(a, b)| a * b).sum();
            out.push(dot + bias[o]);
        }
    }
    out
}

fn dense_backward(
    input: &[f64],
    upstream: &[f64],
    batch: usize,
    p: &LayerParams,
    g: &mut LayerParams,
    need_input_grad: bool,
) -> Vec<f64> {
    let (out_units, in_units) = (p.weight.shape()[0], p.weight.shape()[1]);
    let gw = g.weight.data_mut();
    for s in 0..batch {
        let x = &input[s * in_units..(s + 1) * in_units];
        let dy = &upstream[s * out_units..(s + 1) * out_units];
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (gwv, &xv) in gw[o * in_units..(o + 1) * in_units].iter_mut().zip(x) {
                *gwv += d * xv;
            }
        }
    }
    let gb = g.bias.data_mut();
    for dy in upstream.chunks_exact(out_units) {
        for (gbv, &d) in gb.iter_mut().zip(dy) {
            *gbv += d;
        }
    }
    if !need_input_grad {
        return Vec::new();
    }
    let w = p.weight.data();
    let mut dx = vec![0.0; batch * in_units];
    for s in 0..batch {
        let dy = &upstream[s * out_units..(s + 1) * out_units];
        let dxs = &mut dx[s * in_units..(s + 1) * in_units];
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (dxv, &wv) in dxs.iter_mut().zip(&w[o * in_units..(o + 1) * in_units]) {
                *dxv += d * wv;
            }
        }
    }
    dx
}

/// Geometry shared by the convolution passes.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new(p: &LayerParams, in_shape: &[usize], out_shape: &[usize], stride: usize, padding: usize) -> Self {
        let ws = p.weight.shape();
        Self {
            c: in_shape[0],
            h: in_shape[1],
            w: in_shape[2],
            o: out_shape[0],
            oh: out_shape[1],
            ow: out_shape[2],
            kh: ws[2],
            kw: ws[3],
            stride,
            padding,
        }
    }

    /// Input coordinate for an output position and kernel offset, if inside
    /// the unpadded input.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

fn conv_forward(
    input: &Tensor,
    in_shape: &[usize],
    out_shape: &[usize],
    p: &LayerParams,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let g = ConvGeom::new(p, in_shape, out_shape, stride, padding);
    let batch = input.shape()[0];
    let w = p.weight.data();
    let bias = p.bias.data();
    let x = input.data();
    let in_len = g.c * g.h * g.w;
    let mut out = vec![0.0; batch * g.o * g.oh * g.ow];
    for s in 0..batch {
        let xs = &x[s * in_len..(s + 1) * in_len];
        for o in 0..g.o {
            let plane = &mut out[(s * g.o + o) * g.oh * g.ow..(s * g.o + o + 1) * g.oh * g.ow];
            plane.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..g.c {
                let xc = &xs[c * g.h * g.w..(c + 1) * g.h * g.w];
                let wk = &w[((o * g.c + c) * g.kh) * g.kw..((o * g.c + c + 1) * g.kh) * g.kw];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                                    acc += wk[ky * g.kw + kx] * xc[y * g.w + xx];
                                }
                            }
                        }
                        plane[oy * g.ow + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    upstream: &[f64],
    batch: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    p: &LayerParams,
    grads: &mut LayerParams,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Vec<f64> {
    let g = ConvGeom::new(p, in_shape, out_shape, stride, padding);
    let w = p.weight.data();
    let in_len = g.c * g.h * g.w;
    let plane = g.oh * g.ow;
    let mut dx = if need_input_grad {
        vec![0.0; batch * in_len]
    } else {
        Vec::new()
    };
    for s in 0..batch {
        let xs = &input[s * in_len..(s + 1) * in_len];
        for o in 0..g.o {
            let dy = &upstream[(s * g.o + o) * plane..(s * g.o + o + 1) * plane];
            grads.bias.data_mut()[o] += dy.iter().sum::<f64>();
            for c in 0..g.c {
                let k0 = ((o * g.c + c) * g.kh) * g.kw;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let d = dy[oy * g.ow + ox];
                        if d == 0.0 {
                            continue;
                        }
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                                    let xi = c * g.h * g.w + y * g.w + xx;
                                    grads.weight.data_mut()[k0 + ky * g.kw + kx] += d * xs[xi];
                                    if need_input_grad {
                                        dx[s * in_len + xi] += d * w[k0 + ky * g.kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Index within the input plane of the max of a 2x2 window; ties go to the
/// first element in row-major order.
#[inline]
fn window_argmax(plane: &[f64], width: usize, oy: usize, ox: usize) -> usize {
    let mut best = (2 * oy) * width + 2 * ox;
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let idx = (2 * oy + dy) * width + 2 * ox + dx;
        if plane[idx] > plane[best] {
            best = idx;
        }
    }
    best
}

fn maxpool_forward(input: &Tensor, in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut out = Vec::with_capacity(input.len() / (h * w) * oh * ow);
    for plane in input.data().chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(plane[window_argmax(plane, w, oy, ox)]);
            }
        }
    }
    out
}

fn maxpool_backward(input: &[f64], upstream: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut dx = vec![0.0; input.len()];
    for (p, (plane, dplane)) in input
        .chunks_exact(h * w)
        .zip(dx.chunks_exact_mut(h * w))
        .enumerate()
    {
        for oy in 0..oh {
            for ox in 0..ow {
                dplane[window_argmax(plane, w, oy, ox)] += upstream[p * oh * ow + oy * ow + ox];
            }
        }
    }
    dx
}
