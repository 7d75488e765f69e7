//! CSV run reports and verification tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::LabResult;
use crate::io::atomic_write;

pub const RUN_HEADER: [&str; 12] = [
    "run_id",
    "seed",
    "lift_mode",
    "rank",
    "alpha",
    "trainable_params",
    "total_params",
    "epoch",
    "train_loss",
    "val_loss",
    "val_acc",
    "wall_ms",
];

pub const VERIFY_HEADER: [&str; 5] = ["suite", "check", "value", "threshold", "passed"];

pub const RANK_TRIALS_HEADER: [&str; 5] = ["trial", "low_rank_rank", "hadamard_rank", "low_rank_sigma_max", "hadamard_sigma_min"];

/// Label of the per-mode rows that close a bench report.
pub const SUMMARY_EPOCH: &str = "summary";

/// One row of a run report. `epoch` is a number, or `summary` in bench output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: String,
    pub seed: u64,
    pub lift_mode: String,
    pub rank: usize,
    pub alpha: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub epoch: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub suite: String,
    pub check: String,
    pub value: f64,
    pub threshold: String,
    pub passed: bool,
}

impl VerifyRow {
    pub fn new(suite: &str, check: impl Into<String>, value: f64, threshold: impl Into<String>, passed: bool) -> Self {
        Self {
            suite: suite.into(),
            check: check.into(),
            value,
            threshold: threshold.into(),
            passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTrialRow {
    pub trial: usize,
    pub low_rank_rank: usize,
    pub hadamard_rank: usize,
    pub low_rank_sigma_max: f64,
    pub hadamard_sigma_min: f64,
}

pub fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> LabResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner().expect("in-memory writer"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> LabResult<()> {
    atomic_write(path, &to_csv(rows, header)?)
}

pub fn read_run_report(path: &Path) -> LabResult<Vec<RunRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Checks that `path` is a CSV file whose header is one of the known schemas
/// and whose rows all parse. Returns the matched header name.
pub fn check_csv_schema(path: &Path) -> Result<&'static str, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let header: Vec<String> = r.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    let parse_all = |r: &mut csv::Reader<std::fs::File>, name: &'static str| -> Result<&'static str, String> {
        let n = match name {
            "run" => r.deserialize::<RunRow>().map(|x| x.map(drop)).collect::<Result<Vec<_>, _>>(),
            "verify" => r.deserialize::<VerifyRow>().map(|x| x.map(drop)).collect::<Result<Vec<_>, _>>(),
            _ => r.deserialize::<RankTrialRow>().map(|x| x.map(drop)).collect::<Result<Vec<_>, _>>(),
        };
        n.map(|_| name).map_err(|e| format!("{}: {e}", path.display()))
    };
    if header == RUN_HEADER {
        parse_all(&mut r, "run")
    } else if header == VERIFY_HEADER {
        parse_all(&mut r, "verify")
    } else if header == RANK_TRIALS_HEADER {
        parse_all(&mut r, "rank_trials")
    } else {
        Err(format!("{}: unrecognised header {header:?}", path.display()))
    }
}
