//! End-to-end runs: build data and model from a [`RunConfig`], execute one
//! or more experiments and write the result files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, ModelConfig, RunConfig};
use crate::data::{generate_synthetic, load_idx, partition, ClientData, Dataset};
use crate::error::{config_err, FedError, Result};
use crate::federation::{assign_speed_classes, ExperimentResult, Simulation, Strategy};
use crate::nn::ModelSpec;
use crate::report::{
    rounds_to_threshold, unix_now, ComparisonRow, ComparisonTable, FairnessSummary, JsonLinesWriter, RoundCsvWriter,
    RunManifest,
};

/// Slow-client fractions visited by a sweep.
pub const SWEEP_FRACTIONS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const ROUNDS_JSONL: &str = "rounds.jsonl";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// The configured strategy at the configured slow fraction.
    Train,
    /// FedAvg, FedPrune without CLT and FedPrune on shared seeds.
    Compare,
    /// The compared strategies at every sweep fraction.
    Sweep,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Compare => "compare",
            Command::Sweep => "sweep",
        }
    }

    /// (strategy, slow fraction) pairs to run, in output order.
    pub fn cells(&self, cfg: &RunConfig) -> Vec<(Strategy, f64)> {
        match self {
            Command::Train => vec![(cfg.strategy, cfg.slow_fraction)],
            Command::Compare => Strategy::COMPARED.iter().map(|&s| (s, cfg.slow_fraction)).collect(),
            Command::Sweep => Strategy::COMPARED
                .iter()
                .flat_map(|&s| SWEEP_FRACTIONS.iter().map(move |&f| (s, f)))
                .collect(),
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Command::Train),
            "compare" => Ok(Command::Compare),
            "sweep" => Ok(Command::Sweep),
            other => Err(FedError::Usage(format!("unknown command '{other}'"))),
        }
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        DataConfig::Synthetic { .. } => generate_synthetic(&cfg.synthetic().expect("synthetic source")),
        DataConfig::Idx { images, labels, limit } => {
            let ds = load_idx(images, labels)?;
            Ok(match limit {
                Some(n) if *n < ds.len() => ds.subset(&(0..*n).collect::<Vec<_>>()),
                _ => ds,
            })
        }
    }
}

pub fn build_model(cfg: &ModelConfig, sample_shape: &[usize], classes: usize) -> Result<ModelSpec> {
    match cfg {
        ModelConfig::Mlp { hidden } => ModelSpec::mlp(sample_shape.to_vec(), hidden, classes),
        ModelConfig::Cnn { channels, kernel, hidden } => {
            ModelSpec::cnn(sample_shape.to_vec(), channels, *kernel, hidden, classes)
        }
    }
}

/// Data and model shared by every experiment of a run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub spec: ModelSpec,
    pub clients: Vec<ClientData>,
    pub scheme: &'static str,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let spec = build_model(&cfg.model, ds.sample_shape(), ds.classes())?;
    let plan = cfg.partition_plan();
    let clients = partition(&ds, &plan)?;
    Ok(Prepared {
        spec,
        clients,
        scheme: plan.scheme.label(),
    })
}

/// Run one (strategy, slow fraction) cell of `cfg` over prepared data.
pub fn run_cell(cfg: &RunConfig, prepared: &Prepared, strategy: Strategy, slow_fraction: f64) -> Result<ExperimentResult> {
    let mut exp = cfg.experiment();
    exp.strategy = strategy;
    exp.slow_fraction = slow_fraction;
    let clients = assign_speed_classes(prepared.clients.clone(), slow_fraction, exp.seeds.slow_assignment)?;
    Simulation::new(&prepared.spec, &clients, &exp)?.run(|_| {})
}

pub struct CellResult {
    pub strategy: Strategy,
    pub slow_fraction: f64,
    pub result: ExperimentResult,
}

pub struct RunOutcome {
    pub command: Command,
    pub scheme: &'static str,
    pub cells: Vec<CellResult>,
    pub table: ComparisonTable,
    /// Final-round accuracy spread per strategy at each slow fraction.
    pub fairness: Vec<(f64, FairnessSummary)>,
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

/// Run `command` and write `rounds.csv`, `rounds.jsonl`, `comparison.csv`
/// and `manifest.json` into `cfg.out_dir`.
pub fn run_command(command: Command, cfg: &RunConfig) -> Result<RunOutcome> {
    let started = unix_now();
    let prepared = prepare(cfg)?;
    let cells = command.cells(cfg);
    let results: Vec<ExperimentResult> = cells
        .par_iter()
        .map(|&(s, f)| run_cell(cfg, &prepared, s, f))
        .collect::<Result<_>>()?;
    let cells: Vec<CellResult> = cells
        .into_iter()
        .zip(results)
        .map(|((strategy, slow_fraction), result)| CellResult {
            strategy,
            slow_fraction,
            result,
        })
        .collect();

    let out_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    let scheme = prepared.scheme;
    let mut csv = RoundCsvWriter::create(&out_dir.join(ROUNDS_CSV))?;
    let mut jsonl = JsonLinesWriter::create(&out_dir.join(ROUNDS_JSONL))?;
    let mut table = ComparisonTable::default();
    let mut fairness: Vec<(f64, FairnessSummary)> = Vec::new();
    for c in &cells {
        for r in &c.result.reports {
            csv.write(r, c.slow_fraction, scheme)?;
            jsonl.write(r, c.slow_fraction, scheme)?;
        }
        table.insert(ComparisonRow {
            strategy: c.strategy.name().to_string(),
            slow_fraction: c.slow_fraction,
            scheme: scheme.to_string(),
            final_acc_mean: c.result.final_accuracy(),
            final_acc_std: c.result.final_accuracy_std(),
            rounds_to_threshold: rounds_to_threshold(&c.result.reports, cfg.accuracy_threshold),
        })?;
        match fairness.iter_mut().find(|(f, _)| *f == c.slow_fraction) {
            Some((_, s)) => s.merge(c.result.summary.clone()),
            None => fairness.push((c.slow_fraction, c.result.summary.clone())),
        }
    }
    csv.finish()?;
    jsonl.finish()?;
    table.write_csv(&out_dir.join(COMPARISON_CSV))?;

    let manifest = RunManifest {
        command: command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        seeds: cfg.seeds(),
        started_unix: started,
        finished_unix: unix_now(),
        outputs: [ROUNDS_CSV, ROUNDS_JSONL, COMPARISON_CSV, MANIFEST_JSON]
            .iter()
            .map(|f| out_dir.join(f))
            .collect(),
    };
    manifest.write(&out_dir.join(MANIFEST_JSON))?;
    Ok(RunOutcome {
        command,
        scheme,
        cells,
        table,
        fairness,
        manifest,
        out_dir,
    })
}

/// Re-run the command recorded in a manifest, optionally into another directory.
pub fn replay(manifest_path: &Path, out_dir: Option<&Path>) -> Result<RunOutcome> {
    let manifest = RunManifest::read(manifest_path)?;
    let command: Command = manifest.command.parse()?;
    let mut cfg = manifest.config;
    if cfg.seeds() != manifest.seeds {
        return Err(config_err("manifest seeds disagree with its configuration"));
    }
    if let Some(dir) = out_dir {
        cfg.out_dir = dir.to_path_buf();
    }
    run_command(command, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::from_toml_str(
            r#"
            rounds = 2
            clients_per_round = 3
            epochs = 1
            lr = 0.05
            [data]
            source = "synthetic"
            samples = 120
            features = 4
            classes = 3
            [partition]
            num_clients = 6
            classes_per_client = 2
            [model]
            kind = "mlp"
            hidden = [4]
            "#,
        )
        .unwrap();
        cfg.out_dir = out.to_path_buf();
        cfg
    }

    #[test]
    fn cells_per_command() {
        let cfg = RunConfig::default();
        assert_eq!(Command::Train.cells(&cfg), vec![(cfg.strategy, cfg.slow_fraction)]);
        assert_eq!(Command::Compare.cells(&cfg).len(), 3);
        let sweep = Command::Sweep.cells(&cfg);
        assert_eq!(sweep.len(), 15);
        assert_eq!(sweep.iter().filter(|(s, _)| *s == Strategy::FedAvg).count(), 5);
    }

    #[test]
    fn compare_writes_all_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_command(Command::Compare, &tiny(dir.path())).unwrap();
        assert_eq!(out.table.rows().len(), 3);
        for f in [ROUNDS_CSV, ROUNDS_JSONL, COMPARISON_CSV, MANIFEST_JSON] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let csv = std::fs::read_to_string(dir.path().join(ROUNDS_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3 * 2);
        assert_eq!(ComparisonTable::read_csv(&dir.path().join(COMPARISON_CSV)).unwrap(), out.table);
    }

    #[test]
    fn replay_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = tiny(a.path());
        cfg.strategy = Strategy::FedPrune;
        cfg.slow_fraction = 0.5;
        run_command(Command::Train, &cfg).unwrap();
        replay(&a.path().join(MANIFEST_JSON), Some(b.path())).unwrap();
        for f in [ROUNDS_CSV, ROUNDS_JSONL, COMPARISON_CSV] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }
}
