use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// One line of an experiment log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    /// Hyperparameters and seeds of a stage, written before it runs.
    Config { stage: String, config: Value },
    Epoch {
        stage: String,
        epoch: usize,
        train_loss: f64,
        val_mcr: f64,
        lr: f64,
        /// `None` when wall-clock recording is disabled for replayable logs.
        wall_ms: Option<f64>,
    },
    Prune {
        stage: String,
        granularity: String,
        ratio: f64,
        candidates: usize,
        selected_mcr: f64,
        mask_seed: u64,
    },
    /// The epoch whose weights were kept (lowest validation MCR).
    Best { stage: String, epoch: usize, val_mcr: f64 },
    Eval { stage: String, dataset: String, n: usize, errors: usize, mcr: f64 },
}

/// Append-only record of every train/prune/retrain step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentLog {
    pub records: Vec<LogRecord>,
}

impl ExperimentLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn extend(&mut self, other: ExperimentLog) {
        self.records.extend(other.records);
    }

    /// Epoch records in order.
    pub fn epochs(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| matches!(r, LogRecord::Epoch { .. }))
    }

    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(ExperimentLog { records })
    }

    /// Appends the records to `path`, creating it if needed.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_json_lines()?.as_bytes()).map_err(|e| Error::io(path, e))
    }
}
