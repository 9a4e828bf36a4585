use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::nn::model::ModelSpec;
use crate::tensor::Tensor;

/// Weight and bias of one Dense or Conv layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Model parameters keyed by layer index.
///
/// The flat coordinate order used by aggregation walks layers in ascending
/// index, each layer's weight before its bias.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    layers: BTreeMap<usize, LayerParams>,
}

impl Parameters {
    pub fn insert(&mut self, layer: usize, params: LayerParams) {
        self.layers.insert(layer, params);
    }

    pub fn get(&self, layer: usize) -> Option<&LayerParams> {
        self.layers.get(&layer)
    }

    pub fn get_mut(&mut self, layer: usize) -> Option<&mut LayerParams> {
        self.layers.get_mut(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &LayerParams)> {
        self.layers.iter().map(|(&i, p)| (i, p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (usize, &mut LayerParams)> {
        self.layers.iter_mut().map(|(&i, p)| (i, p))
    }

    pub fn num_coordinates(&self) -> usize {
        self.layers
            .values()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    /// Start offset of each layer's weight block in the flat view.
    pub fn offsets(&self) -> BTreeMap<usize, usize> {
        let mut at = 0;
        self.layers
            .iter()
            .map(|(&i, p)| {
                let start = at;
                at += p.weight.len() + p.bias.len();
                (i, start)
            })
            .collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_coordinates());
        for p in self.layers.values() {
            flat.extend_from_slice(p.weight.data());
            flat.extend_from_slice(p.bias.data());
        }
        flat
    }

    /// Same layout as `self`, values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Parameters> {
        if flat.len() != self.num_coordinates() {
            return Err(input_err(format!(
                "flat vector has {} coordinates, parameters have {}",
                flat.len(),
                self.num_coordinates()
            )));
        }
        let mut out = self.clone();
        let mut at = 0;
        for p in out.layers.values_mut() {
            let w = p.weight.len();
            p.weight.data_mut().copy_from_slice(&flat[at..at + w]);
            at += w;
            let b = p.bias.len();
            p.bias.data_mut().copy_from_slice(&flat[at..at + b]);
            at += b;
        }
        Ok(out)
    }

    pub fn zeros_like(&self) -> Parameters {
        let layers = self
            .layers
            .iter()
            .map(|(&i, p)| {
                (
                    i,
                    LayerParams {
                        weight: Tensor::zeros(p.weight.shape().to_vec()),
                        bias: Tensor::zeros(p.bias.shape().to_vec()),
                    },
                )
            })
            .collect();
        Parameters { layers }
    }

    pub fn same_layout(&self, other: &Parameters) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|((i, a), (j, b))| {
                i == j && a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape()
            })
    }

    /// Check that tensor shapes match the spec exactly.
    pub fn check_matches(&self, spec: &ModelSpec) -> Result<()> {
        let expected = spec.parameterized_layers();
        if expected.len() != self.layers.len() || expected.iter().any(|i| !self.layers.contains_key(i)) {
            return Err(input_err(format!(
                "parameters cover layers {:?}, spec has parameterized layers {:?}",
                self.layers.keys().collect::<Vec<_>>(),
                expected
            )));
        }
        for &i in &expected {
            let layer = spec.layers()[i];
            let p = &self.layers[&i];
            let ws = layer.weight_shape().expect("parameterized");
            let units = ws[0];
            if p.weight.shape() != ws.as_slice() || p.bias.shape() != [units] {
                return Err(input_err(format!(
                    "layer {i}: expected weight {:?} and bias [{units}], got {:?} and {:?}",
                    ws,
                    p.weight.shape(),
                    p.bias.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .values()
            .all(|p| p.weight.all_finite() && p.bias.all_finite())
    }
}
