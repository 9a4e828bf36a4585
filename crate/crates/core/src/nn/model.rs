use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::params::{LayerParams, Parameters};
use crate::rng::seeded_rng;
use crate::tensor::Tensor;

/// One layer of a sequential model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        in_units: usize,
        out_units: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    /// 2x2 window, stride 2.
    MaxPool2d,
    Relu,
    Flatten,
    /// Softmax over the incoming logits with mean cross-entropy loss.
    SoftmaxCrossEntropy {
        classes: usize,
    },
}

impl Layer {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: 0,
        }
    }

    pub fn dense(in_units: usize, out_units: usize) -> Self {
        Layer::Dense {
            in_units,
            out_units,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    /// Output units of a parameterized layer (neurons or filters).
    pub fn units(&self) -> Option<usize> {
        match *self {
            Layer::Dense { out_units, .. } => Some(out_units),
            Layer::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            Layer::Dense {
                in_units,
                out_units,
            } => Some(vec![out_units, in_units]),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some(vec![out_channels, in_channels, kernel_h, kernel_w]),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            Layer::Dense {
                in_units,
                out_units,
            } => {
                if input != [in_units] {
                    return Err(config_err(format!(
                        "dense layer expects input [{in_units}], got {input:?}"
                    )));
                }
                if out_units == 0 {
                    return Err(config_err("dense layer with zero units"));
                }
                Ok(vec![out_units])
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let [c, h, w] = input else {
                    return Err(config_err(format!(
                        "conv layer expects [channels, height, width], got {input:?}"
                    )));
                };
                if *c != in_channels {
                    return Err(config_err(format!(
                        "conv layer expects {in_channels} input channels, got {c}"
                    )));
                }
                if out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                    return Err(config_err("conv layer with a zero-sized dimension"));
                }
                if h + 2 * padding < kernel_h || w + 2 * padding < kernel_w {
                    return Err(config_err(format!(
                        "conv kernel {kernel_h}x{kernel_w} larger than padded input {h}x{w}"
                    )));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel_h) / stride + 1,
                    (w + 2 * padding - kernel_w) / stride + 1,
                ])
            }
            Layer::MaxPool2d => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(config_err(format!(
                    "max-pool needs [channels, h>=2, w>=2], got {input:?}"
                ))),
            },
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::SoftmaxCrossEntropy { classes } => {
                if input != [classes] || classes < 2 {
                    return Err(config_err(format!(
                        "head over {classes} classes cannot consume {input:?}"
                    )));
                }
                Ok(vec![classes])
            }
        }
    }
}

/// Architecture of a sequential classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl ModelSpec {
    /// Build a spec, checking that adjacent layer shapes compose and that
    /// the single softmax head comes last.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(config_err(format!("invalid input shape {input_shape:?}")));
        }
        let heads = layers
            .iter()
            .filter(|l| matches!(l, Layer::SoftmaxCrossEntropy { .. }))
            .count();
        if heads != 1 || !matches!(layers.last(), Some(Layer::SoftmaxCrossEntropy { .. })) {
            return Err(config_err(
                "model needs exactly one softmax cross-entropy head, in last position",
            ));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| config_err(format!("layer {i}: {e}")))?;
        }
        Ok(Self {
            input_shape,
            layers,
        })
    }

    /// Fully connected ReLU network over a (possibly multi-dimensional) input.
    pub fn mlp(input_shape: Vec<usize>, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        if input_shape.len() > 1 {
            layers.push(Layer::Flatten);
        }
        let mut width: usize = input_shape.iter().product();
        for &h in hidden {
            layers.push(Layer::dense(width, h));
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::dense(width, classes));
        layers.push(Layer::SoftmaxCrossEntropy { classes });
        Self::new(input_shape, layers)
    }

    /// Conv (odd `kernel`, same padding) -> ReLU -> 2x2 pool per entry of
    /// `channels`, then a dense ReLU stack and the classifier.
    pub fn cnn(input_shape: Vec<usize>, channels: &[usize], kernel: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let &[mut c, mut h, mut w] = input_shape.as_slice() else {
            return Err(config_err(format!("a CNN needs a [channels, height, width] input, got {input_shape:?}")));
        };
        if kernel.is_multiple_of(2) {
            return Err(config_err(format!("kernel size {kernel} must be odd")));
        }
        let mut layers = Vec::new();
        for &out in channels {
            if h < 2 || w < 2 {
                return Err(config_err(format!("input {input_shape:?} is too small for {} pooling stages", channels.len())));
            }
            layers.push(Layer::Conv2d {
                in_channels: c,
                out_channels: out,
                kernel_h: kernel,
                kernel_w: kernel,
                stride: 1,
                padding: kernel / 2,
            });
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2d);
            c = out;
            h /= 2;
            w /= 2;
        }
        layers.push(Layer::Flatten);
        let mut width = c * h * w;
        for &units in hidden {
            layers.push(Layer::dense(width, units));
            layers.push(Layer::Relu);
            width = units;
        }
        layers.push(Layer::dense(width, classes));
        layers.push(Layer::SoftmaxCrossEntropy { classes });
        Self::new(input_shape, layers)
    }

    /// The two-conv/two-dense image classifier used for the on-device
    /// measurements: 5x5 convolutions with 32 and 64 filters (same padding),
    /// each followed by 2x2 pooling, then dense 3136 -> 2048 -> classes.
    pub fn reference_cnn(classes: usize) -> Self {
        let same = |i, o| Layer::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel_h: 5,
            kernel_w: 5,
            stride: 1,
            padding: 2,
        };
        Self::new(
            vec![1, 28, 28],
            vec![
                same(1, 32),
                Layer::Relu,
                Layer::MaxPool2d,
                same(32, 64),
                Layer::Relu,
                Layer::MaxPool2d,
                Layer::Flatten,
                Layer::dense(3136, 2048),
                Layer::Relu,
                Layer::dense(2048, classes),
                Layer::SoftmaxCrossEntropy { classes },
            ],
        )
        .expect("reference CNN composes")
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::SoftmaxCrossEntropy { classes }) => *classes,
            _ => unreachable!("validated in ModelSpec::new"),
        }
    }

    /// Per-sample input shape of every layer (index i is the input of layer i).
    pub fn input_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            let next = layer.output_shape(&shape).expect("validated spec");
            shapes.push(std::mem::replace(&mut shape, next));
        }
        shapes
    }

    /// Per-sample output shape of every layer.
    pub fn output_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = self.input_shapes();
        shapes.remove(0);
        shapes.push(vec![self.classes()]);
        shapes
    }

    pub fn parameterized_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_parameterized())
            .collect()
    }

    /// Parameterized layers whose units may be dropped: every Dense or Conv
    /// layer except the last one, which produces the logits.
    pub fn prunable_layers(&self) -> Vec<usize> {
        let mut p = self.parameterized_layers();
        p.pop();
        p
    }

    pub fn units(&self, layer: usize) -> usize {
        self.layers[layer].units().unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| {
                let w: usize = l.weight_shape()?.iter().product();
                Some(w + l.units()?)
            })
            .sum()
    }

    /// Multiply-accumulate count of one single-sample forward pass.
    pub fn count_flops(&self) -> u64 {
        self.layers
            .iter()
            .zip(self.output_shapes())
            .map(|(layer, out)| match *layer {
                Layer::Dense {
                    in_units,
                    out_units,
                } => (in_units * out_units) as u64,
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    ..
                } => (out[1] * out[2] * out_channels * in_channels * kernel_h * kernel_w) as u64,
                _ => 0,
            })
            .sum()
    }

    /// Seeded Glorot-uniform weights and zero biases.
    pub fn init_params(&self, seed: u64) -> Parameters {
        let mut rng = seeded_rng(seed);
        let mut params = Parameters::default();
        for (i, layer) in self.layers.iter().enumerate() {
            let Some(shape) = layer.weight_shape() else {
                continue;
            };
            let receptive: usize = shape[2..].iter().product();
            let fan_in = shape[1] * receptive;
            let fan_out = shape[0] * receptive;
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
            let weight = Tensor::new(shape.clone(), data).expect("sized from shape");
            let bias = Tensor::zeros(vec![shape[0]]);
            params.insert(i, LayerParams { weight, bias });
        }
        params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn_builder_reproduces_reference() {
        let built = ModelSpec::cnn(vec![1, 28, 28], &[32, 64], 5, &[2048], 62).unwrap();
        assert_eq!(built, ModelSpec::reference_cnn(62));
        assert!(ModelSpec::cnn(vec![28, 28], &[4], 3, &[], 10).is_err());
        assert!(ModelSpec::cnn(vec![1, 8, 8], &[4], 4, &[], 10).is_err());
    }

    #[test]
    fn shapes_must_compose() {
        assert!(ModelSpec::new(
            vec![4],
            vec![
                Layer::dense(4, 3),
                Layer::dense(2, 2),
                Layer::SoftmaxCrossEntropy { classes: 2 }
            ]
        )
        .is_err());
        assert!(ModelSpec::new(vec![4], vec![Layer::dense(4, 3)]).is_err());
        assert!(ModelSpec::new(
            vec![1, 4, 4],
            vec![Layer::dense(16, 2), Layer::SoftmaxCrossEntropy { classes: 2 }]
        )
        .is_err());
    }

    #[test]
    fn head_must_be_last_and_unique() {
        let r = ModelSpec::new(
            vec![2],
            vec![
                Layer::SoftmaxCrossEntropy { classes: 2 },
                Layer::dense(2, 2),
                Layer::SoftmaxCrossEntropy { classes: 2 },
            ],
        );
        assert!(r.is_err());
    }

    #[test]
    fn dense_flops_are_in_times_out() {
        let spec = ModelSpec::new(
            vec![10],
            vec![Layer::dense(10, 5), Layer::SoftmaxCrossEntropy { classes: 5 }],
        )
        .unwrap();
        assert_eq!(spec.count_flops(), 50);
    }

    #[test]
    fn conv_flops_count_output_positions() {
        let spec = ModelSpec::new(
            vec![1, 3, 3],
            vec![
                Layer::conv(1, 1, 2),
                Layer::Flatten,
                Layer::dense(4, 2),
                Layer::SoftmaxCrossEntropy { classes: 2 },
            ],
        )
        .unwrap();
        // 2x2 output positions, one filter of 1x2x2 taps, plus the dense 4x2
        assert_eq!(spec.count_flops(), 16 + 8);
    }

    #[test]
    fn reference_cnn_has_six_point_six_million_parameters() {
        let spec = ModelSpec::reference_cnn(62);
        assert_eq!(spec.parameter_count(), 6_603_710);
        assert_eq!(spec.prunable_layers(), vec![0, 3, 7]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = ModelSpec::mlp(vec![6], &[5], 3).unwrap();
        let a = spec.init_params(3);
        assert_eq!(a, spec.init_params(3));
        assert_ne!(a, spec.init_params(4));
        let limit = (6.0f64 / 11.0).sqrt();
        let w = &a.get(0).unwrap().weight;
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert!(a.get(0).unwrap().bias.data().iter().all(|&b| b == 0.0));
    }
}
