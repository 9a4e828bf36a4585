//! Structured sub-models: which hidden neurons and conv filters a slow
//! client trains, how that sub-model is cut out of the global model and
//! scattered back, and how kept units are re-chosen from training statistics.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, input_err, Result};
use crate::nn::{Layer, LayerParams, ModelSpec, Parameters};
use crate::rng::seeded_rng;
use crate::tensor::Tensor;

/// Device class of a client.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speed {
    Fast,
    Slow,
}

/// Units dropped from a layer of `width` units at drop rate `k`.
pub fn dropped_units(width: usize, k: f64) -> usize {
    ((k * width as f64).floor() as usize).min(width.saturating_sub(1))
}

/// Units kept in a layer of `width` units at drop rate `k`.
pub fn kept_units(width: usize, k: f64) -> usize {
    width - dropped_units(width, k)
}

fn check_drop_rate(k: f64) -> Result<()> {
    if !(0.0..1.0).contains(&k) {
        return Err(config_err(format!("drop rate {k} outside [0, 1)")));
    }
    Ok(())
}

/// Kept unit indices per prunable layer, sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mask {
    kept: BTreeMap<usize, Vec<usize>>,
}

impl Mask {
    /// Mask keeping every unit.
    pub fn full(spec: &ModelSpec) -> Mask {
        let kept = spec
            .prunable_layers()
            .into_iter()
            .map(|l| (l, (0..spec.units(l)).collect()))
            .collect();
        Mask { kept }
    }

    pub fn new(spec: &ModelSpec, kept: BTreeMap<usize, Vec<usize>>) -> Result<Mask> {
        let mask = Mask { kept };
        mask.validate(spec)?;
        Ok(mask)
    }

    pub fn kept(&self, layer: usize) -> Option<&[usize]> {
        self.kept.get(&layer).map(Vec::as_slice)
    }

    pub fn layers(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.kept.iter().map(|(&l, k)| (l, k.as_slice()))
    }

    /// Kept indices are unique, sorted, in range, and cover exactly the
    /// prunable layers of `spec`.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let prunable = spec.prunable_layers();
        if !self.kept.keys().copied().eq(prunable.iter().copied()) {
            return Err(input_err(format!(
                "mask covers layers {:?}, model's prunable layers are {:?}",
                self.kept.keys().collect::<Vec<_>>(),
                prunable
            )));
        }
        for (&l, kept) in &self.kept {
            let width = spec.units(l);
            if kept.is_empty() {
                return Err(input_err(format!("mask keeps no units of layer {l}")));
            }
            if kept.windows(2).any(|w| w[0] >= w[1]) || kept.last().is_some_and(|&u| u >= width) {
                return Err(input_err(format!(
                    "mask for layer {l} must be sorted unique indices below {width}"
                )));
            }
        }
        Ok(())
    }

    /// Every prunable layer keeps exactly `width - floor(k * width)` units.
    pub fn has_cardinality(&self, spec: &ModelSpec, k: f64) -> bool {
        self.kept
            .iter()
            .all(|(&l, kept)| kept.len() == kept_units(spec.units(l), k))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mask serializes")
    }

    /// Short stable digest of the kept sets.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Uniformly random kept subset per prunable layer.
pub fn random_mask(spec: &ModelSpec, k: f64, seed: u64) -> Result<Mask> {
    check_drop_rate(k)?;
    let mut rng = seeded_rng(seed);
    let kept = spec
        .prunable_layers()
        .into_iter()
        .map(|l| {
            let width = spec.units(l);
            let mut idx = index::sample(&mut rng, width, kept_units(width, k)).into_vec();
            idx.sort_unstable();
            (l, idx)
        })
        .collect();
    Ok(Mask { kept })
}

/// Rows (output units) and columns (input features or channels) of one
/// parameterized layer that belong to the sub-model.
#[derive(Clone, Debug)]
struct LayerSlice {
    rows: Vec<usize>,
    cols: Vec<usize>,
}

/// Follow kept units through the network: a dropped Dense neuron removes its
/// weight row and the matching input column downstream; a dropped filter
/// removes its output channel and, after flattening, every spatial feature
/// of that channel.
fn slice_plan(spec: &ModelSpec, mask: &Mask) -> Result<(ModelSpec, BTreeMap<usize, LayerSlice>)> {
    mask.validate(spec)?;
    let in_shapes = spec.input_shapes();
    let mut selected: Vec<usize> = (0..spec.input_shape()[0]).collect();
    let mut plan = BTreeMap::new();
    let mut sub_layers = Vec::with_capacity(spec.layers().len());
    for (i, layer) in spec.layers().iter().enumerate() {
        let sub = match *layer {
            Layer::Dense { out_units, .. } => {
                let rows = mask.kept(i).map_or_else(|| (0..out_units).collect(), <[usize]>::to_vec);
                let cols = std::mem::replace(&mut selected, rows.clone());
                let sub = Layer::dense(cols.len(), rows.len());
                plan.insert(i, LayerSlice { rows, cols });
                sub
            }
            Layer::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                ..
            } => {
                let rows = mask.kept(i).map_or_else(|| (0..out_channels).collect(), <[usize]>::to_vec);
                let cols = std::mem::replace(&mut selected, rows.clone());
                let sub = Layer::Conv2d {
                    in_channels: cols.len(),
                    out_channels: rows.len(),
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                };
                plan.insert(i, LayerSlice { rows, cols });
                sub
            }
            Layer::Flatten => {
                let shape = &in_shapes[i];
                if shape.len() > 1 {
                    let plane: usize = shape[1..].iter().product();
                    selected = selected
                        .iter()
                        .flat_map(|&c| c * plane..(c + 1) * plane)
                        .collect();
                }
                Layer::Flatten
            }
            other => other,
        };
        sub_layers.push(sub);
    }
    let sub_spec = ModelSpec::new(spec.input_shape().to_vec(), sub_layers)?;
    Ok((sub_spec, plan))
}

/// Elements per (row, column) pair: 1 for Dense, kh*kw for Conv.
fn cell_len(weight: &Tensor) -> usize {
    weight.shape()[2..].iter().product()
}

/// Cut the sub-model selected by `mask` out of the global model.
pub fn extract_submodel(
    spec: &ModelSpec,
    params: &Parameters,
    mask: &Mask,
) -> Result<(ModelSpec, Parameters)> {
    params.check_matches(spec)?;
    let (sub_spec, plan) = slice_plan(spec, mask)?;
    let mut sub = Parameters::default();
    for (layer, slice) in &plan {
        let p = params.get(*layer).expect("checked");
        let cell = cell_len(&p.weight);
        let in_dim = p.weight.shape()[1];
        let w = p.weight.data();
        let mut data = Vec::with_capacity(slice.rows.len() * slice.cols.len() * cell);
        for &r in &slice.rows {
            for &c in &slice.cols {
                let at = (r * in_dim + c) * cell;
                data.extend_from_slice(&w[at..at + cell]);
            }
        }
        let mut shape = p.weight.shape().to_vec();
        shape[0] = slice.rows.len();
        shape[1] = slice.cols.len();
        let bias = slice.rows.iter().map(|&r| p.bias.data()[r]).collect();
        sub.insert(
            *layer,
            LayerParams {
                weight: Tensor::new(shape, data)?,
                bias: Tensor::new(vec![slice.rows.len()], bias)?,
            },
        );
    }
    Ok((sub_spec, sub))
}

/// A sub-model scattered back into global coordinates.
#[derive(Clone, Debug)]
pub struct Broadcast {
    pub params: Parameters,
    /// Per flat coordinate: true where the value came from the sub-model.
    pub trained: Vec<bool>,
}

/// Scatter sub-model weights into a copy of `global`; coordinates outside
/// the mask keep their global values and are flagged untrained.
pub fn broadcast_submodel(
    spec: &ModelSpec,
    global: &Parameters,
    sub: &Parameters,
    mask: &Mask,
) -> Result<Broadcast> {
    global.check_matches(spec)?;
    let (sub_spec, plan) = slice_plan(spec, mask)?;
    sub.check_matches(&sub_spec)?;
    let offsets = global.offsets();
    let mut params = global.clone();
    let mut trained = vec![false; global.num_coordinates()];
    for (layer, slice) in &plan {
        let s = sub.get(*layer).expect("checked");
        let g = params.get_mut(*layer).expect("checked");
        let cell = cell_len(&g.weight);
        let in_dim = g.weight.shape()[1];
        let base = offsets[layer];
        let wlen = g.weight.len();
        let gw = g.weight.data_mut();
        let sw = s.weight.data();
        for (si, &r) in slice.rows.iter().enumerate() {
            for (sj, &c) in slice.cols.iter().enumerate() {
                let dst = (r * in_dim + c) * cell;
                let src = (si * slice.cols.len() + sj) * cell;
                gw[dst..dst + cell].copy_from_slice(&sw[src..src + cell]);
                trained[base + dst..base + dst + cell].fill(true);
            }
            g.bias.data_mut()[r] = s.bias.data()[si];
            trained[base + wlen + r] = true;
        }
    }
    Ok(Broadcast { params, trained })
}

/// Flat coordinates of the global model that belong to the sub-model.
pub fn submodel_coordinates(spec: &ModelSpec, params: &Parameters, mask: &Mask) -> Result<Vec<bool>> {
    let (_, sub) = extract_submodel(spec, params, mask)?;
    Ok(broadcast_submodel(spec, params, &sub, mask)?.trained)
}

/// Running sum and sample count per unit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupAccumulator {
    pub sum: Vec<f64>,
    pub count: Vec<u64>,
}

impl GroupAccumulator {
    fn new(units: usize) -> Self {
        Self {
            sum: vec![0.0; units],
            count: vec![0; units],
        }
    }

    pub fn mean(&self, unit: usize) -> Option<f64> {
        (self.count[unit] > 0).then(|| self.sum[unit] / self.count[unit] as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub slow: GroupAccumulator,
    pub fast: GroupAccumulator,
}

/// One client's per-unit importance values, keyed by prunable layer, as
/// `(global unit index, value)` pairs. Dense layers carry mean |activation|,
/// conv layers the l1 norm of the filter weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnitReport {
    pub layers: BTreeMap<usize, Vec<(usize, f64)>>,
}

impl UnitReport {
    /// Build a report from a finished local training run.
    ///
    /// `activity` is indexed by the trained model's own units: for a slow
    /// client those are sub-model positions, mapped back through `mask`.
    /// `params` are in global coordinates (after broadcast for slow clients).
    pub fn from_training(
        spec: &ModelSpec,
        mask: Option<&Mask>,
        activity: &BTreeMap<usize, Vec<f64>>,
        params: &Parameters,
    ) -> Result<UnitReport> {
        let mut layers = BTreeMap::new();
        for l in spec.prunable_layers() {
            let units: Vec<usize> = match mask {
                Some(m) => m.kept(l).ok_or_else(|| input_err(format!("mask misses layer {l}")))?.to_vec(),
                None => (0..spec.units(l)).collect(),
            };
            let values: Vec<(usize, f64)> = match spec.layers()[l] {
                Layer::Conv2d { .. } => {
                    let w = &params
                        .get(l)
                        .ok_or_else(|| input_err(format!("no parameters for layer {l}")))?
                        .weight;
                    let per_filter = w.row_len();
                    units
                        .iter()
                        .map(|&u| {
                            let l1 = w.data()[u * per_filter..(u + 1) * per_filter]
                                .iter()
                                .map(|v| v.abs())
                                .sum();
                            (u, l1)
                        })
                        .collect()
                }
                _ => {
                    let act = activity
                        .get(&l)
                        .ok_or_else(|| input_err(format!("no activity for layer {l}")))?;
                    if act.len() != units.len() {
                        return Err(input_err(format!(
                            "layer {l}: {} activity values for {} units",
                            act.len(),
                            units.len()
                        )));
                    }
                    units.iter().copied().zip(act.iter().copied()).collect()
                }
            };
            layers.insert(l, values);
        }
        Ok(UnitReport { layers })
    }
}

/// Per-unit statistics split by the speed class of the reporting client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitStats {
    pub layers: BTreeMap<usize, LayerStats>,
}

impl UnitStats {
    pub fn new(spec: &ModelSpec) -> Self {
        let layers = spec
            .prunable_layers()
            .into_iter()
            .map(|l| {
                let n = spec.units(l);
                (
                    l,
                    LayerStats {
                        slow: GroupAccumulator::new(n),
                        fast: GroupAccumulator::new(n),
                    },
                )
            })
            .collect();
        Self { layers }
    }

    pub fn reset(&mut self) {
        for s in self.layers.values_mut() {
            for g in [&mut s.slow, &mut s.fast] {
                g.sum.fill(0.0);
                g.count.fill(0);
            }
        }
    }

    /// Add one client's report into the accumulator of its speed group.
    pub fn accumulate(&mut self, speed: Speed, report: &UnitReport) -> Result<()> {
        for (l, values) in &report.layers {
            let stats = self
                .layers
                .get(l)
                .ok_or_else(|| input_err(format!("layer {l} is not prunable")))?;
            if let Some(&(u, _)) = values.iter().find(|(u, _)| *u >= stats.fast.sum.len()) {
                return Err(input_err(format!("unit {u} out of range for layer {l}")));
            }
            if let Some(&(u, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
                return Err(input_err(format!("non-finite statistic {v} for unit {u} of layer {l}")));
            }
        }
        for (l, values) in &report.layers {
            let stats = self.layers.get_mut(l).expect("checked");
            let group = match speed {
                Speed::Slow => &mut stats.slow,
                Speed::Fast => &mut stats.fast,
            };
            for &(u, v) in values {
                group.sum[u] += v;
                group.count[u] += 1;
            }
        }
        Ok(())
    }

    /// Equal-weight blend of the slow-group and fast-group means; a unit seen
    /// by one group only takes that group's mean, and an unseen unit scores 0.
    pub fn blended_score(&self) -> BTreeMap<usize, Vec<f64>> {
        self.layers
            .iter()
            .map(|(&l, s)| {
                let scores = (0..s.fast.sum.len())
                    .map(|u| match (s.slow.mean(u), s.fast.mean(u)) {
                        (Some(a), Some(b)) => 0.5 * a + 0.5 * b,
                        (Some(a), None) | (None, Some(a)) => a,
                        (None, None) => 0.0,
                    })
                    .collect();
                (l, scores)
            })
            .collect()
    }
}

/// Indices of the `keep` highest scores, ties to the lower index, returned sorted.
pub fn top_units(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..keep.min(order.len())].to_vec();
    kept.sort_unstable();
    kept
}

/// Re-choose kept units: per prunable layer, the top
/// `width - floor(k * width)` units by blended score.
pub fn update_mask(stats: &UnitStats, spec: &ModelSpec, k: f64) -> Result<Mask> {
    check_drop_rate(k)?;
    let scores = stats.blended_score();
    let kept = spec
        .prunable_layers()
        .into_iter()
        .map(|l| {
            let s = scores
                .get(&l)
                .ok_or_else(|| input_err(format!("no statistics for layer {l}")))?;
            if s.len() != spec.units(l) {
                return Err(input_err(format!("statistics for layer {l} have wrong width")));
            }
            Ok((l, top_units(s, kept_units(s.len(), k))))
        })
        .collect::<Result<_>>()?;
    Mask::new(spec, kept)
}

/// Product over layers of C(n, floor(k * n)).
pub fn count_submodels_lower_bound(hidden_widths: &[usize], k: f64) -> BigUint {
    hidden_widths
        .iter()
        .map(|&n| binomial(n, (k * n as f64).floor() as usize))
        .product()
}

fn binomial(n: usize, r: usize) -> BigUint {
    if r > n {
        return BigUint::ZERO;
    }
    let r = r.min(n - r);
    let mut acc = BigUint::from(1u32);
    for i in 0..r {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}
