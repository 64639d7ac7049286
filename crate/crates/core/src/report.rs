//! JSON-lines metric reports and run records.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{DicoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub metric_id: String,
    pub value: f64,
}

/// One row per metric, in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, step: u64, metric_id: &str, value: f64) {
        self.rows.push(MetricRow { step, metric_id: metric_id.to_string(), value });
    }

    pub fn get(&self, metric_id: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric_id == metric_id).map(|r| r.value)
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        self.rows.iter().map(|r| (r.metric_id.clone(), r.value)).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.rows)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(Self { rows: read_jsonl(path)? })
    }
}

/// One optimizer step of a fine-tuning run. `val_metrics` is filled on the
/// steps that close a validated epoch and empty otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub reward_mean: f64,
    pub kl_to_ref: f64,
    pub val_metrics: BTreeMap<String, f64>,
    pub checkpoint_path: Option<String>,
}

/// Checks the append-only contract: steps strictly increase.
pub fn check_records(records: &[RunRecord]) -> Result<()> {
    for pair in records.windows(2) {
        if pair[1].step <= pair[0].step {
            return Err(DicoError::Data(format!("record steps not increasing: {} then {}", pair[0].step, pair[1].step)));
        }
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn append_jsonl<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(row)?)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DicoError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Value series `(step, value)` for a metric: the per-step fields
/// `loss`, `reward_mean`, `kl_to_ref`, or any key of `val_metrics`.
pub fn metric_series(records: &[RunRecord], metric: &str) -> Vec<(u64, f64)> {
    records
        .iter()
        .filter_map(|r| {
            let v = match metric {
                "loss" => Some(r.loss),
                "reward_mean" => Some(r.reward_mean),
                "kl_to_ref" => Some(r.kl_to_ref),
                other => r.val_metrics.get(other).copied(),
            };
            v.map(|v| (r.step, v))
        })
        .collect()
}
