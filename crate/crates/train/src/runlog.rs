//! Per-epoch metrics, persisted as one JSON object per line.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub accuracy: f64,
    /// Mean cross-entropy.
    pub loss: f64,
    /// Last-block spatial entropy, averaged over heads then images.
    pub mean_entropy: f64,
    /// Last-block component count, averaged over heads then images.
    pub mean_components: f64,
    /// Best-head Jaccard of thresholded CLS attention against the foreground mask.
    pub mean_jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_aux: f64,
    pub train_accuracy: f64,
    pub mean_entropy: f64,
    pub mean_components: f64,
    pub test: Option<EvalMetrics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Most recent test-set metrics.
    pub fn last_eval(&self) -> Option<&EvalMetrics> {
        self.records.iter().rev().find_map(|r| r.test.as_ref())
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let records = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<serde_json::Result<_>>()?;
        Ok(Self { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_jsonl(&std::fs::read_to_string(path)?)
    }

    /// Appends one record as a line.
    pub fn append(path: impl AsRef<Path>, record: &EpochRecord) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, test: bool) -> EpochRecord {
        EpochRecord {
            epoch,
            step: epoch * 32,
            lr: 1e-3 / 3.0,
            train_loss: 1.0 / 7.0,
            train_ce: 0.1,
            train_aux: std::f64::consts::LN_2,
            train_accuracy: 0.5,
            mean_entropy: 0.123456789012345,
            mean_components: 2.25,
            test: test.then(|| EvalMetrics {
                samples: 500,
                accuracy: 0.338,
                loss: 1.1,
                mean_entropy: 0.9,
                mean_components: 3.1,
                mean_jaccard: 0.2 / 3.0,
            }),
        }
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let log = RunLog { records: vec![record(1, false), record(2, true)] };
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(RunLog::parse_jsonl(&text).unwrap(), log);
        assert_eq!(log.last_eval().unwrap().samples, 500);
    }

    #[test]
    fn append_only_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runlog.jsonl");
        RunLog::append(&path, &record(1, true)).unwrap();
        RunLog::append(&path, &record(2, false)).unwrap();
        let log = RunLog::load(&path).unwrap();
        assert_eq!(log.records, vec![record(1, true), record(2, false)]);
    }
}
