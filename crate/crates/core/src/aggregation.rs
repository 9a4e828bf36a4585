//! Server-side combination of client models.
//!
//! Both aggregators work per flat coordinate over the clients that actually
//! trained that coordinate, weighting each by its sample count renormalised
//! over that subset. Coordinates nobody trained keep the caller's previous
//! global value. Clients are always reduced in ascending `client_id` order so
//! results do not depend on arrival order.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::nn::Parameters;
use crate::rng::stream_rng;

/// One client's returned model in global coordinates.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: Parameters,
    /// Per flat coordinate: true where this client trained the value.
    pub trained: Vec<bool>,
    pub n_k: u64,
}

impl ClientUpdate {
    /// An update from a client that trained the whole model.
    pub fn full(client_id: usize, params: Parameters, n_k: u64) -> Self {
        let trained = vec![true; params.num_coordinates()];
        Self {
            client_id,
            params,
            trained,
            n_k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    FedAvg,
    Clt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AggregationConfig {
    pub mode: AggregationMode,
    /// 1-based round index; the CLT spread shrinks as 1/sqrt(round).
    pub round: u64,
    pub seed: u64,
}

struct Flattened<'a> {
    values: Vec<Vec<f64>>,
    updates: Vec<&'a ClientUpdate>,
}

fn prepare<'a>(updates: &'a [ClientUpdate], layout: Option<&Parameters>) -> Result<Flattened<'a>> {
    if updates.is_empty() {
        return Err(input_err("no client updates to aggregate"));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(input_err("duplicate client id among updates"));
    }
    let reference = layout.unwrap_or(&sorted[0].params);
    for u in &sorted {
        if !u.params.same_layout(reference) {
            return Err(input_err(format!(
                "client {} sent parameters with a different layout",
                u.client_id
            )));
        }
        if u.trained.len() != reference.num_coordinates() {
            return Err(input_err(format!(
                "client {} trained-mask has {} entries for {} coordinates",
                u.client_id,
                u.trained.len(),
                reference.num_coordinates()
            )));
        }
        if u.n_k == 0 {
            return Err(input_err(format!("client {} reports zero samples", u.client_id)));
        }
    }
    Ok(Flattened {
        values: sorted.iter().map(|u| u.params.to_flat()).collect(),
        updates: sorted,
    })
}

/// Per-coordinate weighted mean and weighted population standard deviation.
/// Untrained coordinates come back as `None`.
fn moments(f: &Flattened) -> Vec<Option<(f64, f64)>> {
    let coords = f.values[0].len();
    (0..coords)
        .map(|j| {
            let mut total = 0u64;
            let mut count = 0usize;
            for u in &f.updates {
                if u.trained[j] {
                    total += u.n_k;
                    count += 1;
                }
            }
            if total == 0 {
                return None;
            }
            // Agreeing clients: return their value untouched rather than a
            // rounded weighted sum with a spurious ~1e-16 spread.
            let mut trained_values = f.updates.iter().zip(&f.values).filter(|(u, _)| u.trained[j]).map(|(_, v)| v[j]);
            let first = trained_values.next().expect("total > 0");
            if trained_values.all(|v| v.to_bits() == first.to_bits()) {
                return Some((first, 0.0));
            }
            let denom = total as f64;
            let mut mean = 0.0;
            let mut weight_sum = 0.0;
            for (u, v) in f.updates.iter().zip(&f.values) {
                if u.trained[j] {
                    let w = u.n_k as f64 / denom;
                    weight_sum += w;
                    mean += w * v[j];
                }
            }
            debug_assert!((weight_sum - 1.0).abs() < 1e-12, "weights sum to {weight_sum}");
            let sd = if count < 2 {
                0.0
            } else {
                f.updates
                    .iter()
                    .zip(&f.values)
                    .filter(|(u, _)| u.trained[j])
                    .map(|(u, v)| (u.n_k as f64 / denom) * (v[j] - mean).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            Some((mean, sd))
        })
        .collect()
}

/// Sample-weighted mean per coordinate over the clients that trained it;
/// coordinates trained by nobody keep `previous`.
pub fn weighted_mean(updates: &[ClientUpdate], previous: &Parameters) -> Result<Parameters> {
    let f = prepare(updates, Some(previous))?;
    let prev = previous.to_flat();
    let out: Vec<f64> = moments(&f)
        .into_iter()
        .zip(prev)
        .map(|(m, p)| m.map_or(p, |(mean, _)| mean))
        .collect();
    previous.with_flat(&out)
}

/// Weighted population standard deviation per coordinate, with the same
/// renormalised weights as [`weighted_mean`]. Coordinates trained by fewer
/// than two clients get 0.
pub fn weighted_stdev(updates: &[ClientUpdate]) -> Result<Parameters> {
    let f = prepare(updates, None)?;
    let out: Vec<f64> = moments(&f)
        .into_iter()
        .map(|m| m.map_or(0.0, |(_, sd)| sd))
        .collect();
    f.updates[0].params.with_flat(&out)
}

/// Draw every coordinate from Normal(mean, (stdev / sqrt(round))^2).
///
/// One standard-normal variate is consumed per coordinate, in flat order,
/// from a generator keyed by `(seed, round)`; coordinates with zero spread
/// return the mean exactly.
pub fn clt_aggregate(
    updates: &[ClientUpdate],
    previous: &Parameters,
    config: &AggregationConfig,
) -> Result<Parameters> {
    if config.round == 0 {
        return Err(config_err("round index starts at 1"));
    }
    let f = prepare(updates, Some(previous))?;
    let scale = 1.0 / (config.round as f64).sqrt();
    let mut rng = stream_rng(config.seed, config.round);
    let out: Vec<f64> = moments(&f)
        .into_iter()
        .zip(previous.to_flat())
        .map(|(m, p)| {
            let z: f64 = rng.sample(StandardNormal);
            match m {
                Some((mean, sd)) if sd > 0.0 => mean + sd * scale * z,
                Some((mean, _)) => mean,
                None => p,
            }
        })
        .collect();
    previous.with_flat(&out)
}

/// Dispatch on `config.mode`.
pub fn aggregate(
    updates: &[ClientUpdate],
    previous: &Parameters,
    config: &AggregationConfig,
) -> Result<Parameters> {
    match config.mode {
        AggregationMode::FedAvg => weighted_mean(updates, previous),
        AggregationMode::Clt => clt_aggregate(updates, previous, config),
    }
}

/// Sum of `n_k` over the clients that trained each coordinate.
pub fn coordinate_weight_totals(updates: &[ClientUpdate]) -> Result<Vec<u64>> {
    let f = prepare(updates, None)?;
    let coords = f.values[0].len();
    Ok((0..coords)
        .map(|j| f.updates.iter().filter(|u| u.trained[j]).map(|u| u.n_k).sum())
        .collect())
}

/// The global step written in gradient form: `global - lr * sum(n_k H_k) / n`,
/// for clients that each took one full-batch step with gradient `H_k`.
pub fn fedavg_equivalence_form(
    global_before: &Parameters,
    gradients: &[(u64, Parameters)],
    lr: f64,
) -> Result<Parameters> {
    if gradients.is_empty() {
        return Err(input_err("no client gradients"));
    }
    let total: u64 = gradients.iter().map(|(n, _)| n).sum();
    if total == 0 {
        return Err(input_err("client sample counts sum to zero"));
    }
    let mut step = vec![0.0; global_before.num_coordinates()];
    for (n, g) in gradients {
        if !g.same_layout(global_before) {
            return Err(input_err("gradient layout differs from global parameters"));
        }
        let w = *n as f64 / total as f64;
        for (s, v) in step.iter_mut().zip(g.to_flat()) {
            *s += w * v;
        }
    }
    let out: Vec<f64> = global_before
        .to_flat()
        .into_iter()
        .zip(step)
        .map(|(p, s)| p - lr * s)
        .collect();
    global_before.with_flat(&out)
}
