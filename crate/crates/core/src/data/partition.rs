use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{config_err, input_err, Result};
use crate::rng::seeded_rng;

const OWNERSHIP_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartitionScheme {
    /// Every sample goes to a uniformly random client.
    Iid,
    /// Every client owns a few random classes; each class's samples are
    /// spread uniformly over its owners.
    SkewedNiid { classes_per_client: usize },
}

impl PartitionScheme {
    pub fn skewed() -> Self {
        PartitionScheme::SkewedNiid {
            classes_per_client: 5,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PartitionScheme::Iid => "iid",
            PartitionScheme::SkewedNiid { .. } => "skewed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub num_clients: usize,
    /// Fraction of each client's samples used for training; the rest is its test set.
    pub train_fraction: f64,
    pub seed: u64,
}

/// One client's local data, plus the source-dataset indices it came from.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

pub fn partition(dataset: &Dataset, plan: &PartitionPlan) -> Result<Vec<ClientData>> {
    if plan.num_clients == 0 {
        return Err(config_err("partition needs at least one client"));
    }
    if !(plan.train_fraction > 0.0 && plan.train_fraction < 1.0) {
        return Err(config_err(format!(
            "train fraction {} outside (0, 1)",
            plan.train_fraction
        )));
    }
    let mut rng = seeded_rng(plan.seed);
    let owner: Vec<usize> = match plan.scheme {
        PartitionScheme::Iid => (0..dataset.len())
            .map(|_| rng.random_range(0..plan.num_clients))
            .collect(),
        PartitionScheme::SkewedNiid { classes_per_client } => {
            if classes_per_client == 0 {
                return Err(config_err("classes_per_client must be positive"));
            }
            let owners = draw_class_owners(dataset, plan.num_clients, classes_per_client, &mut rng)?;
            dataset
                .labels()
                .iter()
                .map(|&l| {
                    let o = &owners[l];
                    o[rng.random_range(0..o.len())]
                })
                .collect()
        }
    };

    let mut per_client = vec![Vec::new(); plan.num_clients];
    for (i, &o) in owner.iter().enumerate() {
        per_client[o].push(i);
    }
    per_client
        .into_iter()
        .enumerate()
        .map(|(k, mut idx)| {
            let m = idx.len();
            if m < 2 {
                return Err(input_err(format!(
                    "client {k} received {m} samples; every client needs at least one train and one test sample"
                )));
            }
            idx.shuffle(&mut rng);
            let n_train = ((plan.train_fraction * m as f64).round() as usize).clamp(1, m - 1);
            let mut train_indices = idx[..n_train].to_vec();
            let mut test_indices = idx[n_train..].to_vec();
            train_indices.sort_unstable();
            test_indices.sort_unstable();
            Ok(ClientData {
                train: dataset.subset(&train_indices),
                test: dataset.subset(&test_indices),
                train_indices,
                test_indices,
            })
        })
        .collect()
}

/// For each class, the clients that own it. Redraws every client's class set
/// until each class present in the data has an owner.
fn draw_class_owners(
    dataset: &Dataset,
    clients: usize,
    per_client: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let classes = dataset.classes();
    let per_client = per_client.min(classes);
    let present: Vec<bool> = dataset.class_counts().iter().map(|&c| c > 0).collect();
    for _ in 0..OWNERSHIP_RETRIES {
        let mut owners = vec![Vec::new(); classes];
        for k in 0..clients {
            for c in index::sample(rng, classes, per_client) {
                owners[c].push(k);
            }
        }
        if owners.iter().zip(&present).all(|(o, &p)| !p || !o.is_empty()) {
            return Ok(owners);
        }
    }
    Err(input_err(format!(
        "could not cover all {classes} classes with {clients} clients owning {per_client} each after {OWNERSHIP_RETRIES} draws"
    )))
}

/// Shannon entropy (nats) of a dataset's label distribution.
pub fn label_entropy(dataset: &Dataset) -> f64 {
    let n = dataset.len() as f64;
    dataset
        .class_counts()
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}
