#![allow(dead_code)]

use fedprune::data::{
    generate_synthetic, partition, ClientData, PartitionPlan, PartitionScheme, SyntheticConfig,
};
use fedprune::nn::{forward, Batch, Layer, ModelSpec, Parameters};
use fedprune::pruning::Mask;
use fedprune::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Pre-activations closer than this to a ReLU hinge (or max-pool entries
/// closer than this to the runner-up) make finite differences unreliable.
pub const KINK_MARGIN: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;
pub const FD_REL: f64 = 1e-4;
pub const FD_ABS: f64 = 1e-7;

/// A random MLP or small CNN with at most three parameterized layers and at
/// most 16 units per layer.
pub fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    loop {
        let classes = rng.random_range(2..=5);
        let spec = if rng.random_bool(0.5) {
            let input = rng.random_range(1..=6);
            let depth = rng.random_range(0..=2);
            let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=16)).collect();
            ModelSpec::mlp(vec![input], &hidden, classes)
        } else {
            let c = rng.random_range(1..=2);
            let h = rng.random_range(4..=7);
            let w = rng.random_range(4..=7);
            let filters = rng.random_range(1..=4);
            let k = rng.random_range(1..=3);
            let conv = Layer::Conv2d {
                in_channels: c,
                out_channels: filters,
                kernel_h: k,
                kernel_w: k,
                stride: rng.random_range(1..=2),
                padding: rng.random_range(0..=1),
            };
            let mut layers = vec![conv, Layer::Relu];
            if rng.random_bool(0.6) {
                layers.push(Layer::MaxPool2d);
            }
            layers.push(Layer::Flatten);
            let Some(flat) = flattened_width(vec![c, h, w], &layers) else {
                continue;
            };
            if rng.random_bool(0.5) {
                let hidden = rng.random_range(1..=16);
                layers.push(Layer::dense(flat, hidden));
                layers.push(Layer::Relu);
                layers.push(Layer::dense(hidden, classes));
            } else {
                layers.push(Layer::dense(flat, classes));
            }
            layers.push(Layer::SoftmaxCrossEntropy { classes });
            ModelSpec::new(vec![c, h, w], layers)
        };
        if let Ok(s) = spec {
            return s;
        }
    }
}

/// Output width of a conv/relu/pool/flatten prefix, computed by hand.
fn flattened_width(input: Vec<usize>, layers: &[Layer]) -> Option<usize> {
    let (mut c, mut h, mut w) = (input[0], input[1], input[2]);
    for l in layers {
        match *l {
            Layer::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                ..
            } => {
                let ph = h + 2 * padding;
                let pw = w + 2 * padding;
                if ph < kernel_h || pw < kernel_w {
                    return None;
                }
                c = out_channels;
                h = (ph - kernel_h) / stride + 1;
                w = (pw - kernel_w) / stride + 1;
            }
            Layer::MaxPool2d => {
                if h < 2 || w < 2 {
                    return None;
                }
                h /= 2;
                w /= 2;
            }
            _ => {}
        }
    }
    Some(c * h * w)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Every weight and bias drawn from N(0, scale^2).
pub fn random_params(spec: &ModelSpec, rng: &mut ChaCha8Rng, scale: f64) -> Parameters {
    let template = spec.init_params(0);
    let flat = gaussian(rng, template.num_coordinates(), scale);
    template.with_flat(&flat).unwrap()
}

pub fn random_batch(spec: &ModelSpec, rng: &mut ChaCha8Rng, size: usize) -> Batch {
    let mut shape = vec![size];
    shape.extend_from_slice(spec.input_shape());
    let n: usize = shape.iter().product();
    let inputs = Tensor::new(shape, gaussian(rng, n, 1.0)).unwrap();
    let labels = (0..size).map(|_| rng.random_range(0..spec.classes())).collect();
    Batch::new(inputs, labels).unwrap()
}

/// True when some ReLU input or max-pool window sits within `KINK_MARGIN`
/// of a point where the loss is not differentiable.
pub fn near_kink(spec: &ModelSpec, params: &Parameters, batch: &Batch) -> bool {
    let pass = forward(spec, params, batch).unwrap();
    let shapes = spec.input_shapes();
    for (i, layer) in spec.layers().iter().enumerate() {
        let input = if i == 0 { &batch.inputs } else { &pass.outputs[i - 1] };
        match layer {
            Layer::Relu => {
                if input.data().iter().any(|z| z.abs() < KINK_MARGIN) {
                    return true;
                }
            }
            Layer::MaxPool2d => {
                let s = &shapes[i];
                let (c, h, w) = (s[0], s[1], s[2]);
                let x = input.data();
                for b in 0..batch.len() {
                    for ch in 0..c {
                        let plane = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                        for oy in 0..h / 2 {
                            for ox in 0..w / 2 {
                                let mut win = [
                                    plane[2 * oy * w + 2 * ox],
                                    plane[2 * oy * w + 2 * ox + 1],
                                    plane[(2 * oy + 1) * w + 2 * ox],
                                    plane[(2 * oy + 1) * w + 2 * ox + 1],
                                ];
                                win.sort_by(|a, b| b.total_cmp(a));
                                let gap = win[0] - win[1];
                                let flat_zero = gap == 0.0 && win[0] == 0.0;
                                if gap < KINK_MARGIN && !flat_zero {
                                    return true;
                                }
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    false
}

pub fn loss_at(spec: &ModelSpec, params: &Parameters, batch: &Batch) -> f64 {
    forward(spec, params, batch).unwrap().loss
}

/// Outcome of comparing analytic gradients with central differences.
pub struct GradientCheck {
    pub coordinates: usize,
    pub failures: usize,
    /// Over coordinates whose gradient exceeds 1e-3 in magnitude.
    pub worst_rel: f64,
    pub worst_abs: f64,
}

pub fn check_gradients(spec: &ModelSpec, params: &Parameters, batch: &Batch, analytic: &Parameters) -> GradientCheck {
    let base = params.to_flat();
    let grad = analytic.to_flat();
    let mut failures = 0;
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut probe = base.clone();
    for j in 0..base.len() {
        probe[j] = base[j] + FD_STEP;
        let up = loss_at(spec, &params.with_flat(&probe).unwrap(), batch);
        probe[j] = base[j] - FD_STEP;
        let down = loss_at(spec, &params.with_flat(&probe).unwrap(), batch);
        probe[j] = base[j];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let diff = (numeric - grad[j]).abs();
        let scale = numeric.abs().max(grad[j].abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        worst_abs = worst_abs.max(diff);
        if scale > 1e-3 {
            worst_rel = worst_rel.max(rel);
        }
        if diff > FD_ABS && rel > FD_REL {
            failures += 1;
        }
    }
    GradientCheck {
        coordinates: base.len(),
        failures,
        worst_rel,
        worst_abs,
    }
}

/// Global parameters with every dropped unit's incoming weights and bias zeroed.
pub fn zero_dropped(spec: &ModelSpec, params: &Parameters, mask: &Mask) -> Parameters {
    let mut out = params.clone();
    for l in spec.prunable_layers() {
        let kept = mask.kept(l).unwrap();
        let p = out.get_mut(l).unwrap();
        let row = p.weight.row_len();
        for u in (0..spec.units(l)).filter(|u| !kept.contains(u)) {
            p.weight.data_mut()[u * row..(u + 1) * row].fill(0.0);
            p.bias.data_mut()[u] = 0.0;
        }
    }
    out
}

/// Draw a random model, parameters and batch away from every kink.
pub fn smooth_instance(rng: &mut ChaCha8Rng) -> (ModelSpec, Parameters, Batch) {
    loop {
        let spec = random_spec(rng);
        let params = random_params(&spec, rng, 0.5);
        let size = rng.random_range(1..=4);
        let batch = random_batch(&spec, rng, size);
        if !near_kink(&spec, &params, &batch) {
            return (spec, params, batch);
        }
    }
}

/// The desk-scale label-skewed scenario used for the directional checks:
/// 20 clients holding 5 of 10 Gaussian-mixture classes each.
pub fn skewed_clients(seed: u64) -> (ModelSpec, Vec<ClientData>) {
    let ds = generate_synthetic(
        &SyntheticConfig::new(3000, 20, 10, seed)
            .with_spread(1.5)
            .with_modes(2),
    )
    .unwrap();
    let spec = ModelSpec::mlp(vec![20], &[32], 10).unwrap();
    let clients = partition(
        &ds,
        &PartitionPlan {
            scheme: PartitionScheme::skewed(),
            num_clients: 20,
            train_fraction: 0.8,
            seed: seed.wrapping_add(1000),
        },
    )
    .unwrap();
    (spec, clients)
}
