use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{config_err, input_err, Result};
use crate::nn::engine::{forward, forward_backward, ForwardPass};
use crate::nn::model::ModelSpec;
use crate::nn::params::Parameters;
use crate::rng::seeded_rng;

/// Local solver settings shared by every client in a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Parameters,
    /// Mean absolute post-activation per hidden unit (per filter for conv
    /// layers, averaged over spatial positions), over every training sample
    /// seen. Keyed by prunable layer index.
    pub unit_activity: BTreeMap<usize, Vec<f64>>,
    /// Sample-weighted mean of the batch losses in the last epoch.
    pub final_epoch_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// `params - lr * gradients`, elementwise.
pub fn sgd_step(params: &Parameters, gradients: &Parameters, lr: f64) -> Result<Parameters> {
    let mut out = params.clone();
    apply_sgd(&mut out, gradients, lr)?;
    Ok(out)
}

fn apply_sgd(params: &mut Parameters, gradients: &Parameters, lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(config_err(format!("learning rate {lr} must be finite and non-negative")));
    }
    if !params.same_layout(gradients) {
        return Err(input_err("gradient layout differs from parameters"));
    }
    for ((_, p), (_, g)) in params.iter_mut().zip(gradients.iter()) {
        for (w, d) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *w -= lr * d;
        }
        for (b, d) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
            *b -= lr * d;
        }
    }
    Ok(())
}

/// Minibatch SGD on one client's data.
///
/// Each epoch reshuffles the sample order with a seeded Fisher-Yates pass;
/// samples inside a minibatch are then processed in ascending index order,
/// so a full-size batch is exactly one full-batch gradient step.
pub fn local_train(
    spec: &ModelSpec,
    params: &Parameters,
    dataset: &Dataset,
    settings: TrainSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(input_err("cannot train on an empty dataset"));
    }
    if settings.epochs == 0 || settings.batch_size == 0 {
        return Err(config_err("epochs and batch size must be positive"));
    }
    params.check_matches(spec)?;
    let mut rng = seeded_rng(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut params = params.clone();
    let mut activity: BTreeMap<usize, Vec<f64>> = spec
        .prunable_layers()
        .into_iter()
        .map(|l| (l, vec![0.0; spec.units(l)]))
        .collect();
    let mut final_epoch_loss = 0.0;
    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(settings.batch_size) {
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            let batch = dataset.batch(&idx)?;
            let (pass, grads) = forward_backward(spec, &params, &batch)?;
            accumulate_activity(&pass, &mut activity);
            epoch_loss += pass.loss * idx.len() as f64;
            apply_sgd(&mut params, &grads, settings.lr)?;
        }
        final_epoch_loss = epoch_loss / dataset.len() as f64;
    }
    let seen = (settings.epochs * dataset.len()) as f64;
    for v in activity.values_mut() {
        v.iter_mut().for_each(|a| *a /= seen);
    }
    Ok(TrainOutcome {
        params,
        unit_activity: activity,
        final_epoch_loss,
    })
}

/// Add each sample's per-unit mean |activation| into `activity`.
fn accumulate_activity(pass: &ForwardPass, activity: &mut BTreeMap<usize, Vec<f64>>) {
    for (layer, act) in pass.activations() {
        let sums = activity.get_mut(&layer).expect("prunable layer");
        let units = sums.len();
        let per_unit = act.row_len() / units;
        for sample in act.data().chunks_exact(units * per_unit) {
            for (u, cells) in sample.chunks_exact(per_unit).enumerate() {
                sums[u] += cells.iter().map(|v| v.abs()).sum::<f64>() / per_unit as f64;
            }
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 512;

pub fn evaluate(spec: &ModelSpec, params: &Parameters, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(input_err("cannot evaluate on an empty dataset"));
    }
    let classes = spec.classes();
    let mut correct = 0usize;
    let mut loss = 0.0;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let batch = dataset.batch(chunk)?;
        let pass = forward(spec, params, &batch)?;
        loss += pass.loss * chunk.len() as f64;
        for (row, &label) in pass.logits.data().chunks_exact(classes).zip(&batch.labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    let n = dataset.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
    })
}
