//! TOML run configuration.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected. Command-line overrides are applied on top of
//! the file before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PartitionPlan, PartitionScheme, SyntheticConfig};
use crate::error::{FedError, Result};
use crate::federation::{ExperimentConfig, Seeds, Strategy};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub rounds: u64,
    pub clients_per_round: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub drop_rate: f64,
    pub mask_update_round: u64,
    pub slow_fraction: f64,
    pub eval_every: u64,
    /// Accuracy a run must exceed to count as converged in comparison tables.
    pub accuracy_threshold: f64,
    /// Master seed; every other seed is derived from it unless overridden.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub seeds: SeedOverrides,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            strategy: e.strategy,
            rounds: e.rounds,
            clients_per_round: e.clients_per_round,
            epochs: e.epochs,
            batch_size: e.batch_size,
            lr: e.lr,
            drop_rate: e.drop_rate,
            mask_update_round: e.mask_update_round,
            slow_fraction: e.slow_fraction,
            eval_every: e.eval_every,
            accuracy_threshold: 0.8,
            seed: 0,
            out_dir: PathBuf::from("fedprune-out"),
            seeds: SeedOverrides::default(),
            data: DataConfig::default(),
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

/// Explicit seeds that replace the ones derived from the master seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slow_assignment: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shuffle: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampling: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian class clusters.
    Synthetic {
        #[serde(default = "defaults::samples")]
        samples: usize,
        #[serde(default = "defaults::features")]
        features: usize,
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::spread")]
        spread: f64,
        #[serde(default = "defaults::modes")]
        modes: usize,
    },
    /// IDX image and label files (the MNIST distribution format).
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
}

mod defaults {
    pub fn samples() -> usize {
        4000
    }
    pub fn features() -> usize {
        20
    }
    pub fn classes() -> usize {
        10
    }
    pub fn spread() -> f64 {
        1.0
    }
    pub fn modes() -> usize {
        1
    }
    pub fn classes_per_client() -> usize {
        5
    }
    pub fn num_clients() -> usize {
        50
    }
    pub fn train_fraction() -> f64 {
        0.8
    }
    pub fn hidden() -> Vec<usize> {
        vec![64]
    }
    pub fn channels() -> Vec<usize> {
        vec![32, 64]
    }
    pub fn kernel() -> usize {
        5
    }
    pub fn cnn_hidden() -> Vec<usize> {
        vec![2048]
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            samples: defaults::samples(),
            features: defaults::features(),
            classes: defaults::classes(),
            spread: defaults::spread(),
            modes: defaults::modes(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Iid,
    Skewed,
}

impl std::str::FromStr for SchemeName {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(SchemeName::Iid),
            "skewed" => Ok(SchemeName::Skewed),
            other => Err(FedError::Usage(format!("unknown partition '{other}' (expected iid or skewed)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: SchemeName,
    pub classes_per_client: usize,
    pub num_clients: usize,
    pub train_fraction: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            scheme: SchemeName::Skewed,
            classes_per_client: defaults::classes_per_client(),
            num_clients: defaults::num_clients(),
            train_fraction: defaults::train_fraction(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        #[serde(default = "defaults::hidden")]
        hidden: Vec<usize>,
    },
    /// Conv/ReLU/max-pool blocks with "same" padding, then dense layers.
    Cnn {
        #[serde(default = "defaults::channels")]
        channels: Vec<usize>,
        #[serde(default = "defaults::kernel")]
        kernel: usize,
        #[serde(default = "defaults::cnn_hidden")]
        hidden: Vec<usize>,
    },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mlp {
            hidden: defaults::hidden(),
        }
    }
}

/// Values given on the command line; each one that is set wins over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub strategy: Option<Strategy>,
    pub slow_fraction: Option<f64>,
    pub rounds: Option<u64>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub partition: Option<SchemeName>,
}

fn key_err(key: &str, value: impl std::fmt::Display, rule: &str) -> FedError {
    FedError::Config(format!("{key} = {value}: {rule}"))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| FedError::Usage(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            FedError::Usage(m) => FedError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.strategy {
            self.strategy = s;
        }
        if let Some(f) = o.slow_fraction {
            self.slow_fraction = f;
        }
        if let Some(r) = o.rounds {
            self.rounds = r;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(p) = o.partition {
            self.partition.scheme = p;
        }
    }

    /// Check every key against its allowed range; the error names the key.
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(key_err("rounds", self.rounds, "must be at least 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.partition.num_clients {
            return Err(key_err(
                "clients_per_round",
                self.clients_per_round,
                &format!("must lie in [1, partition.num_clients = {}]", self.partition.num_clients),
            ));
        }
        if self.epochs == 0 {
            return Err(key_err("epochs", self.epochs, "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(key_err("batch_size", self.batch_size, "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(key_err("lr", self.lr, "must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(key_err("drop_rate", self.drop_rate, "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.slow_fraction) {
            return Err(key_err("slow_fraction", self.slow_fraction, "must lie in [0, 1)"));
        }
        if self.mask_update_round == 0 {
            return Err(key_err("mask_update_round", self.mask_update_round, "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(key_err("eval_every", self.eval_every, "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.accuracy_threshold) {
            return Err(key_err("accuracy_threshold", self.accuracy_threshold, "must lie in [0, 1]"));
        }
        let p = &self.partition;
        if p.num_clients == 0 {
            return Err(key_err("partition.num_clients", p.num_clients, "must be at least 1"));
        }
        if p.classes_per_client == 0 {
            return Err(key_err("partition.classes_per_client", p.classes_per_client, "must be at least 1"));
        }
        if !(p.train_fraction > 0.0 && p.train_fraction < 1.0) {
            return Err(key_err("partition.train_fraction", p.train_fraction, "must lie in (0, 1)"));
        }
        if let DataConfig::Synthetic {
            samples,
            features,
            classes,
            spread,
            modes,
        } = &self.data
        {
            if *classes < 2 {
                return Err(key_err("data.classes", classes, "must be at least 2"));
            }
            if *features == 0 {
                return Err(key_err("data.features", features, "must be at least 1"));
            }
            if *samples < *classes {
                return Err(key_err("data.samples", samples, "must be at least data.classes"));
            }
            if !(spread.is_finite() && *spread > 0.0) {
                return Err(key_err("data.spread", spread, "must be positive"));
            }
            if *modes == 0 {
                return Err(key_err("data.modes", modes, "must be at least 1"));
            }
        }
        match &self.model {
            ModelConfig::Mlp { hidden } if hidden.contains(&0) => {
                return Err(key_err("model.hidden", format!("{hidden:?}"), "widths must be positive"));
            }
            ModelConfig::Cnn { channels, kernel, hidden } => {
                if channels.is_empty() || channels.contains(&0) {
                    return Err(key_err("model.channels", format!("{channels:?}"), "needs positive widths"));
                }
                if *kernel == 0 || kernel % 2 == 0 {
                    return Err(key_err("model.kernel", kernel, "must be odd"));
                }
                if hidden.contains(&0) {
                    return Err(key_err("model.hidden", format!("{hidden:?}"), "widths must be positive"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        let base = Seeds::from_master(self.seed);
        let o = &self.seeds;
        Seeds {
            selection: o.selection.unwrap_or(base.selection),
            slow_assignment: o.slow_assignment.unwrap_or(base.slow_assignment),
            init: o.init.unwrap_or(base.init),
            shuffle: o.shuffle.unwrap_or(base.shuffle),
            sampling: o.sampling.unwrap_or(base.sampling),
            mask: o.mask.unwrap_or(base.mask),
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.seeds.data.unwrap_or_else(|| derive_seed(self.seed, &[7]))
    }

    pub fn partition_seed(&self) -> u64 {
        self.seeds.partition.unwrap_or_else(|| derive_seed(self.seed, &[8]))
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            strategy: self.strategy,
            rounds: self.rounds,
            clients_per_round: self.clients_per_round,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            drop_rate: self.drop_rate,
            mask_update_round: self.mask_update_round,
            slow_fraction: self.slow_fraction,
            eval_every: self.eval_every,
            seeds: self.seeds(),
        }
    }

    pub fn partition_plan(&self) -> PartitionPlan {
        let p = &self.partition;
        PartitionPlan {
            scheme: match p.scheme {
                SchemeName::Iid => PartitionScheme::Iid,
                SchemeName::Skewed => PartitionScheme::SkewedNiid {
                    classes_per_client: p.classes_per_client,
                },
            },
            num_clients: p.num_clients,
            train_fraction: p.train_fraction,
            seed: self.partition_seed(),
        }
    }

    pub fn synthetic(&self) -> Option<SyntheticConfig> {
        match &self.data {
            DataConfig::Synthetic {
                samples,
                features,
                classes,
                spread,
                modes,
            } => Some(
                SyntheticConfig::new(*samples, *features, *classes, self.data_seed())
                    .with_spread(*spread)
                    .with_modes(*modes),
            ),
            DataConfig::Idx { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.batch_size, 10);
        assert_eq!(cfg.clients_per_round, 10);
        assert_eq!(cfg.drop_rate, 0.5);
        assert_eq!(cfg.mask_update_round, 10);
        assert_eq!(cfg.epochs, 10);
    }

    #[test]
    fn out_of_range_value_names_key() {
        let err = RunConfig::from_toml_str("slow_fraction = 1.2").unwrap_err().to_string();
        assert!(err.contains("slow_fraction"), "{err}");
        let err = RunConfig::from_toml_str("[partition]\ntrain_fraction = 0.0").unwrap_err().to_string();
        assert!(err.contains("partition.train_fraction"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_toml_str("learning_rate = 0.1").unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        assert!(RunConfig::from_toml_str("[data]\nsource = \"synthetic\"\nsample = 3").is_err());
    }

    #[test]
    fn tables_parse() {
        let text = r#"
            strategy = "fedprune_no_clt"
            seed = 4
            [seeds]
            sampling = 99
            [data]
            source = "idx"
            images = "a.idx"
            labels = "b.idx"
            limit = 100
            [partition]
            scheme = "iid"
            num_clients = 20
            [model]
            kind = "cnn"
            channels = [4, 8]
            hidden = [16]
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.strategy, Strategy::FedPruneNoClt);
        assert_eq!(cfg.seeds().sampling, 99);
        assert_eq!(cfg.seeds().selection, Seeds::from_master(4).selection);
        assert!(matches!(cfg.data, DataConfig::Idx { limit: Some(100), .. }));
        assert_eq!(cfg.partition_plan().scheme, PartitionScheme::Iid);
        assert_eq!(
            cfg.model,
            ModelConfig::Cnn {
                channels: vec![4, 8],
                kernel: 5,
                hidden: vec![16]
            }
        );
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::from_toml_str("rounds = 7\nslow_fraction = 0.1").unwrap();
        cfg.apply(&Overrides {
            slow_fraction: Some(0.9),
            partition: Some(SchemeName::Iid),
            ..Default::default()
        });
        assert_eq!(cfg.rounds, 7);
        assert_eq!(cfg.slow_fraction, 0.9);
        assert_eq!(cfg.partition.scheme, SchemeName::Iid);
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::from_toml_str("[seeds]\nmask = 3").unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
