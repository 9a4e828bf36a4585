//! Per-round logs, comparison tables and run manifests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{input_err, Result};
use crate::federation::{RoundReport, Seeds};

/// Column header of the per-round CSV.
pub const ROUND_COLUMNS: [&str; 7] = ["round", "strategy", "slow_fraction", "scheme", "train_loss", "acc_mean", "acc_std"];

/// Spread of final per-client accuracy (and loss) for one strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessRow {
    pub strategy: String,
    pub round: u64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub loss_mean: f64,
    pub loss_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FairnessSummary {
    pub rows: Vec<FairnessRow>,
}

impl FairnessSummary {
    pub fn row(&self, strategy: &str) -> Option<&FairnessRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    /// True when `a` ends with a strictly lower accuracy spread than `b`.
    pub fn more_fair(&self, a: &str, b: &str) -> Option<bool> {
        Some(self.row(a)?.acc_std < self.row(b)?.acc_std)
    }

    pub fn merge(&mut self, other: FairnessSummary) {
        for row in other.rows {
            self.rows.retain(|r| r.strategy != row.strategy);
            self.rows.push(row);
        }
    }
}

/// One row per strategy, taken from its last evaluated round.
pub fn fairness_summary(reports: &[RoundReport]) -> Result<FairnessSummary> {
    let mut last: BTreeMap<&str, &RoundReport> = BTreeMap::new();
    for r in reports.iter().filter(|r| !r.client_accuracies.is_empty()) {
        let entry = last.entry(r.strategy.name()).or_insert(r);
        if r.round >= entry.round {
            *entry = r;
        }
    }
    let rows = last
        .into_iter()
        .map(|(name, r)| {
            let (acc_mean, acc_std) = crate::federation::mean_std(&r.client_accuracies).expect("non-empty");
            let (loss_mean, loss_std) = crate::federation::mean_std(&r.client_losses)
                .ok_or_else(|| input_err(format!("round {} has accuracies but no losses", r.round)))?;
            Ok(FairnessRow {
                strategy: name.to_string(),
                round: r.round,
                acc_mean,
                acc_std,
                loss_mean,
                loss_std,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FairnessSummary { rows })
}

/// First round whose mean accuracy exceeds `threshold`.
pub fn rounds_to_threshold(reports: &[RoundReport], threshold: f64) -> Option<u64> {
    reports
        .iter()
        .find(|r| r.acc_mean.is_some_and(|a| a > threshold))
        .map(|r| r.round)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub slow_fraction: f64,
    pub scheme: String,
    pub final_acc_mean: f64,
    pub final_acc_std: f64,
    pub rounds_to_threshold: Option<u64>,
}

/// Final results keyed by (strategy, slow fraction, scheme).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ComparisonTable {
    rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn rows(&self) -> &[ComparisonRow] {
        &self.rows
    }

    pub fn insert(&mut self, row: ComparisonRow) -> Result<()> {
        if self.get(&row.strategy, row.slow_fraction, &row.scheme).is_some() {
            return Err(input_err(format!(
                "duplicate comparison row for {} at slow fraction {} ({})",
                row.strategy, row.slow_fraction, row.scheme
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, strategy: &str, slow_fraction: f64, scheme: &str) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.slow_fraction == slow_fraction && r.scheme == scheme)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut table = ComparisonTable::default();
        for row in r.deserialize() {
            table.insert(row?)?;
        }
        Ok(table)
    }
}

/// Writes `round,strategy,slow_fraction,scheme,train_loss,acc_mean,acc_std`
/// rows. Missing values are left empty.
pub struct RoundCsvWriter {
    inner: csv::Writer<File>,
}

impl RoundCsvWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path)?;
        inner.write_record(ROUND_COLUMNS)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, report: &RoundReport, slow_fraction: f64, scheme: &str) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.inner.write_record([
            report.round.to_string(),
            report.strategy.name().to_string(),
            slow_fraction.to_string(),
            scheme.to_string(),
            opt(report.train_loss),
            opt(report.acc_mean),
            opt(report.acc_std),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Full round reports, one JSON object per line.
pub struct JsonLinesWriter {
    inner: BufWriter<File>,
}

#[derive(Serialize)]
struct JsonLine<'a> {
    slow_fraction: f64,
    scheme: &'a str,
    #[serde(flatten)]
    report: &'a RoundReport,
}

impl JsonLinesWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            inner: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, report: &RoundReport, slow_fraction: f64, scheme: &str) -> Result<()> {
        let line = JsonLine {
            slow_fraction,
            scheme,
            report,
        };
        serde_json::to_writer(&mut self.inner, &line)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
