//! Round orchestration for FedAvg and FedPrune.
//!
//! Each round the server samples clients, serves the full model to fast
//! clients and (under FedPrune) the masked sub-model to slow ones, folds the
//! returned models together and evaluates the new global model on every
//! client's test split. The mask starts random and is re-chosen from unit
//! statistics every `mask_update_round` rounds.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, coordinate_weight_totals, AggregationConfig, AggregationMode, ClientUpdate};
use crate::data::{ClientData, Dataset};
use crate::error::{config_err, Result};
use crate::nn::{evaluate, local_train, ModelSpec, Parameters, TrainSettings};
use crate::pruning::{broadcast_submodel, extract_submodel, random_mask, update_mask, Mask, UnitReport, UnitStats};
use crate::report::{fairness_summary, FairnessSummary};
use crate::rng::{derive_seed, stream_rng};

pub use crate::pruning::Speed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Slow clients are dropped; plain weighted averaging.
    #[serde(rename = "fedavg")]
    FedAvg,
    /// Sub-model for slow clients, CLT aggregation.
    #[serde(rename = "fedprune")]
    FedPrune,
    /// Sub-model for slow clients, weighted averaging.
    #[serde(rename = "fedprune_no_clt")]
    FedPruneNoClt,
    /// Every client trains the sub-model; weighted averaging.
    #[serde(rename = "small_model")]
    SmallModel,
}

impl Strategy {
    pub const COMPARED: [Strategy; 3] = [Strategy::FedAvg, Strategy::FedPruneNoClt, Strategy::FedPrune];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedPrune => "fedprune",
            Strategy::FedPruneNoClt => "fedprune_no_clt",
            Strategy::SmallModel => "small_model",
        }
    }

    fn aggregation_mode(&self) -> AggregationMode {
        match self {
            Strategy::FedPrune => AggregationMode::Clt,
            _ => AggregationMode::FedAvg,
        }
    }

    fn uses_mask(&self) -> bool {
        !matches!(self, Strategy::FedAvg)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = crate::FedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Strategy::FedAvg),
            "fedprune" => Ok(Strategy::FedPrune),
            "fedprune_no_clt" => Ok(Strategy::FedPruneNoClt),
            "small_model" => Ok(Strategy::SmallModel),
            other => Err(crate::FedError::Usage(format!(
                "unknown strategy '{other}' (expected fedavg, fedprune, fedprune_no_clt or small_model)"
            ))),
        }
    }
}

/// Independent seeds for each random decision in an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Which clients take part in each round.
    pub selection: u64,
    /// Which clients are slow.
    pub slow_assignment: u64,
    /// Initial global weights.
    pub init: u64,
    /// Minibatch order of local training.
    pub shuffle: u64,
    /// Normal draws of the CLT aggregator.
    pub sampling: u64,
    /// Bootstrap random mask.
    pub mask: u64,
}

impl Seeds {
    pub fn from_master(seed: u64) -> Self {
        Self {
            selection: derive_seed(seed, &[1]),
            slow_assignment: derive_seed(seed, &[2]),
            init: derive_seed(seed, &[3]),
            shuffle: derive_seed(seed, &[4]),
            sampling: derive_seed(seed, &[5]),
            mask: derive_seed(seed, &[6]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub rounds: u64,
    pub clients_per_round: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub drop_rate: f64,
    pub mask_update_round: u64,
    pub slow_fraction: f64,
    /// Evaluate the global model every this many rounds (and always on the last).
    pub eval_every: u64,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FedPrune,
            rounds: 50,
            clients_per_round: 10,
            epochs: 10,
            batch_size: 10,
            lr: 0.001,
            drop_rate: 0.5,
            mask_update_round: 10,
            slow_fraction: 0.0,
            eval_every: 1,
            seeds: Seeds::from_master(0),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(config_err("rounds must be at least 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > num_clients {
            return Err(config_err(format!(
                "clients_per_round {} must lie in [1, {num_clients}]",
                self.clients_per_round
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err("epochs and batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(config_err(format!("drop_rate {} outside [0, 1)", self.drop_rate)));
        }
        if !(0.0..1.0).contains(&self.slow_fraction) {
            return Err(config_err(format!("slow_fraction {} outside [0, 1)", self.slow_fraction)));
        }
        if self.mask_update_round == 0 || self.eval_every == 0 {
            return Err(config_err("mask_update_round and eval_every must be at least 1"));
        }
        Ok(())
    }

    fn settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClientProfile {
    pub id: usize,
    pub speed: Speed,
    pub train: Dataset,
    pub test: Dataset,
}

impl ClientProfile {
    pub fn n_k(&self) -> u64 {
        self.train.len() as u64
    }
}

/// Mark exactly `floor(slow_fraction * N)` clients slow, chosen uniformly by seed.
pub fn assign_speed_classes(clients: Vec<ClientData>, slow_fraction: f64, seed: u64) -> Result<Vec<ClientProfile>> {
    if !(0.0..1.0).contains(&slow_fraction) {
        return Err(config_err(format!("slow_fraction {slow_fraction} outside [0, 1)")));
    }
    let n = clients.len();
    let slow_count = (slow_fraction * n as f64).floor() as usize;
    let mut slow = vec![false; n];
    for i in index::sample(&mut stream_rng(seed, 0), n, slow_count) {
        slow[i] = true;
    }
    Ok(clients
        .into_iter()
        .enumerate()
        .map(|(id, c)| ClientProfile {
            id,
            speed: if slow[id] { Speed::Slow } else { Speed::Fast },
            train: c.train,
            test: c.test,
        })
        .collect())
}

/// Uniform sample of `n` client ids without replacement, determined by
/// `(seed, round)` alone. Returned in ascending order.
pub fn select_round_clients(num_clients: usize, n: usize, round: u64, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > num_clients {
        return Err(config_err(format!("cannot select {n} of {num_clients} clients")));
    }
    let mut ids = index::sample(&mut stream_rng(seed, round), num_clients, n).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Per-round record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub strategy: Strategy,
    pub selected: Vec<usize>,
    pub participants: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Sum of `n_k` over participants.
    pub participant_samples: u64,
    /// Largest per-coordinate aggregation weight total (0 for an empty round).
    pub weight_denominator: u64,
    /// Sample-weighted mean of the participants' last-epoch training loss.
    pub train_loss: Option<f64>,
    /// Test accuracy of the global model on every client, by client id;
    /// empty on rounds that were not evaluated.
    pub client_accuracies: Vec<f64>,
    pub client_losses: Vec<f64>,
    pub acc_mean: Option<f64>,
    pub acc_std: Option<f64>,
    pub mask_fingerprint: Option<String>,
    pub mask_refreshed: bool,
    pub empty_round: bool,
}

/// Server state carried between rounds.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub global: Parameters,
    pub mask: Option<Mask>,
    pub stats: Option<UnitStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Dropped,
    Full,
    Sub,
}

struct ClientResult {
    update: ClientUpdate,
    speed: Speed,
    report: UnitReport,
    loss: f64,
}

/// One experiment over a fixed client population.
pub struct Simulation<'a> {
    pub spec: &'a ModelSpec,
    pub clients: &'a [ClientProfile],
    pub cfg: &'a ExperimentConfig,
}

impl<'a> Simulation<'a> {
    pub fn new(spec: &'a ModelSpec, clients: &'a [ClientProfile], cfg: &'a ExperimentConfig) -> Result<Self> {
        cfg.validate(clients.len())?;
        if clients.iter().enumerate().any(|(i, c)| c.id != i) {
            return Err(config_err("client ids must be 0..N in order"));
        }
        for c in clients {
            if c.train.is_empty() || c.test.is_empty() {
                return Err(config_err(format!("client {} needs train and test samples", c.id)));
            }
            if c.train.sample_shape() != spec.input_shape() || c.train.classes() > spec.classes() {
                return Err(config_err(format!(
                    "client {} data shaped {:?} does not fit the model input {:?}",
                    c.id,
                    c.train.sample_shape(),
                    spec.input_shape()
                )));
            }
        }
        Ok(Self { spec, clients, cfg })
    }

    pub fn initial_state(&self) -> Result<ServerState> {
        let global = self.spec.init_params(self.cfg.seeds.init);
        let (mask, stats) = if self.cfg.strategy.uses_mask() {
            (
                Some(random_mask(self.spec, self.cfg.drop_rate, self.cfg.seeds.mask)?),
                Some(UnitStats::new(self.spec)),
            )
        } else {
            (None, None)
        };
        Ok(ServerState { global, mask, stats })
    }

    fn role(&self, speed: Speed) -> Role {
        match (self.cfg.strategy, speed) {
            (Strategy::FedAvg, Speed::Slow) => Role::Dropped,
            (Strategy::FedAvg, Speed::Fast) => Role::Full,
            (Strategy::SmallModel, _) => Role::Sub,
            (_, Speed::Fast) => Role::Full,
            (_, Speed::Slow) => Role::Sub,
        }
    }

    fn train_client(&self, state: &ServerState, id: usize, role: Role, round: u64) -> Result<ClientResult> {
        let client = &self.clients[id];
        let seed = derive_seed(self.cfg.seeds.shuffle, &[round, id as u64]);
        let settings = self.cfg.settings();
        let (update, report, loss) = match role {
            Role::Full => {
                let out = local_train(self.spec, &state.global, &client.train, settings, seed)?;
                let report = UnitReport::from_training(self.spec, None, &out.unit_activity, &out.params)?;
                (ClientUpdate::full(id, out.params, client.n_k()), report, out.final_epoch_loss)
            }
            Role::Sub => {
                let mask = state.mask.as_ref().expect("masked strategy has a mask");
                let (sub_spec, sub) = extract_submodel(self.spec, &state.global, mask)?;
                let out = local_train(&sub_spec, &sub, &client.train, settings, seed)?;
                let b = broadcast_submodel(self.spec, &state.global, &out.params, mask)?;
                let report = UnitReport::from_training(self.spec, Some(mask), &out.unit_activity, &b.params)?;
                let update = ClientUpdate {
                    client_id: id,
                    params: b.params,
                    trained: b.trained,
                    n_k: client.n_k(),
                };
                (update, report, out.final_epoch_loss)
            }
            Role::Dropped => unreachable!("dropped clients do not train"),
        };
        Ok(ClientResult {
            update,
            speed: client.speed,
            report,
            loss,
        })
    }

    /// Run round `t` (1-based) on the selected clients and return the new state.
    pub fn run_round(&self, mut state: ServerState, selected: &[usize], t: u64) -> Result<(ServerState, RoundReport)> {
        let roles: Vec<(usize, Role)> = selected.iter().map(|&id| (id, self.role(self.clients[id].speed))).collect();
        let dropped: Vec<usize> = roles.iter().filter(|(_, r)| *r == Role::Dropped).map(|(id, _)| *id).collect();
        let results: Vec<ClientResult> = roles
            .par_iter()
            .filter(|(_, r)| *r != Role::Dropped)
            .map(|&(id, role)| self.train_client(&state, id, role, t))
            .collect::<Result<_>>()?;

        let participants: Vec<usize> = results.iter().map(|r| r.update.client_id).collect();
        let participant_samples: u64 = results.iter().map(|r| r.update.n_k).sum();
        let train_loss = (participant_samples > 0).then(|| {
            results.iter().map(|r| r.loss * r.update.n_k as f64).sum::<f64>() / participant_samples as f64
        });

        if let Some(stats) = state.stats.as_mut() {
            for r in &results {
                stats.accumulate(r.speed, &r.report)?;
            }
        }

        let updates: Vec<ClientUpdate> = results.into_iter().map(|r| r.update).collect();
        let weight_denominator = if updates.is_empty() {
            0
        } else {
            coordinate_weight_totals(&updates)?.into_iter().max().unwrap_or(0)
        };
        if !updates.is_empty() {
            let agg = AggregationConfig {
                mode: self.cfg.strategy.aggregation_mode(),
                round: t,
                seed: self.cfg.seeds.sampling,
            };
            state.global = aggregate(&updates, &state.global, &agg)?;
        }

        let mut mask_refreshed = false;
        if let (Some(mask), Some(stats)) = (state.mask.as_mut(), state.stats.as_mut()) {
            if t.is_multiple_of(self.cfg.mask_update_round) {
                *mask = update_mask(stats, self.spec, self.cfg.drop_rate)?;
                stats.reset();
                mask_refreshed = true;
            }
        }

        let evaluate_now = t.is_multiple_of(self.cfg.eval_every) || t == self.cfg.rounds;
        let (client_accuracies, client_losses) = if evaluate_now {
            self.evaluate_all(&state.global)?
        } else {
            (Vec::new(), Vec::new())
        };
        let (acc_mean, acc_std) = match mean_std(&client_accuracies) {
            Some((m, s)) => (Some(m), Some(s)),
            None => (None, None),
        };
        let report = RoundReport {
            round: t,
            strategy: self.cfg.strategy,
            selected: selected.to_vec(),
            empty_round: participants.is_empty(),
            participants,
            dropped,
            participant_samples,
            weight_denominator,
            train_loss,
            client_accuracies,
            client_losses,
            acc_mean,
            acc_std,
            mask_fingerprint: state.mask.as_ref().map(Mask::fingerprint),
            mask_refreshed,
        };
        Ok((state, report))
    }

    /// Test accuracy and loss of `params` on every client's test split.
    pub fn evaluate_all(&self, params: &Parameters) -> Result<(Vec<f64>, Vec<f64>)> {
        let evals = self
            .clients
            .par_iter()
            .map(|c| evaluate(self.spec, params, &c.test))
            .collect::<Result<Vec<_>>>()?;
        Ok(evals.into_iter().map(|e| (e.accuracy, e.mean_loss)).unzip())
    }

    /// Run every round, handing each report to `on_round` as it completes.
    pub fn run(&self, mut on_round: impl FnMut(&RoundReport)) -> Result<ExperimentResult> {
        let mut state = self.initial_state()?;
        let mut reports = Vec::with_capacity(self.cfg.rounds as usize);
        for t in 1..=self.cfg.rounds {
            let selected = select_round_clients(self.clients.len(), self.cfg.clients_per_round, t, self.cfg.seeds.selection)?;
            let (next, report) = self.run_round(state, &selected, t)?;
            state = next;
            on_round(&report);
            reports.push(report);
        }
        let summary = fairness_summary(&reports)?;
        Ok(ExperimentResult {
            reports,
            summary,
            final_state: state,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub reports: Vec<RoundReport>,
    pub summary: FairnessSummary,
    pub final_state: ServerState,
}

impl ExperimentResult {
    pub fn final_report(&self) -> &RoundReport {
        self.reports.last().expect("at least one round")
    }

    pub fn final_accuracy(&self) -> f64 {
        self.final_report().acc_mean.expect("last round is evaluated")
    }

    pub fn final_accuracy_std(&self) -> f64 {
        self.final_report().acc_std.expect("last round is evaluated")
    }
}

/// Run `cfg` over `clients` with a fresh model.
pub fn run_experiment(spec: &ModelSpec, clients: &[ClientProfile], cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    Simulation::new(spec, clients, cfg)?.run(|_| {})
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}
