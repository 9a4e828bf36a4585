use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{input_err, Result};
use crate::rng::seeded_rng;
use crate::tensor::Tensor;

/// Gaussian class clusters.
///
/// Each class owns `modes` centres drawn from a standard normal per feature;
/// a sample is its class's centre (mode chosen uniformly) plus isotropic
/// noise with standard deviation `spread`. Smaller spread means a wider
/// margin. Labels are assigned round-robin, so class sizes differ by at most one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_spread() -> f64 {
    1.0
}

fn default_modes() -> usize {
    1
}

impl SyntheticConfig {
    pub fn new(samples: usize, features: usize, classes: usize, seed: u64) -> Self {
        Self {
            samples,
            features,
            classes,
            spread: default_spread(),
            modes: default_modes(),
            seed,
        }
    }

    pub fn with_spread(mut self, spread: f64) -> Self {
        self.spread = spread;
        self
    }

    pub fn with_modes(mut self, modes: usize) -> Self {
        self.modes = modes;
        self
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.samples == 0 || cfg.features == 0 || cfg.classes == 0 || cfg.modes == 0 {
        return Err(input_err("synthetic dataset sizes must all be positive"));
    }
    if cfg.classes > cfg.samples {
        return Err(input_err(format!(
            "{} classes cannot fit in {} samples",
            cfg.classes, cfg.samples
        )));
    }
    if !(cfg.spread.is_finite() && cfg.spread >= 0.0) {
        return Err(input_err(format!("invalid spread {}", cfg.spread)));
    }
    let mut rng = seeded_rng(cfg.seed);
    let centres: Vec<f64> = (0..cfg.classes * cfg.modes * cfg.features)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut data = Vec::with_capacity(cfg.samples * cfg.features);
    let mut labels = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let label = i % cfg.classes;
        let mode = if cfg.modes > 1 {
            rng.random_range(0..cfg.modes)
        } else {
            0
        };
        let at = (label * cfg.modes + mode) * cfg.features;
        for &c in &centres[at..at + cfg.features] {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(c + cfg.spread * noise);
        }
        labels.push(label);
    }
    Dataset::new(
        Tensor::new(vec![cfg.samples, cfg.features], data)?,
        labels,
        cfg.classes,
    )
}
