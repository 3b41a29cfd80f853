//! JSON-lines metrics log.
//!
//! One JSON object per line, each carrying a `"phase"` tag:
//!
//! * `teacher`: `epoch, loss, grad_norm, train_accuracy`
//! * `strategy`: `epoch, task_loss, qer, loss, weight_grad_norm,
//!   beta_grad_norm, layer_bits[], betas[], changes[], beta_clamps,
//!   train_accuracy`
//! * `post-training`: `epoch, kd, ebr, loss, grad_norm, bin_variance,
//!   bin_entropy[], train_accuracy`
//! * `summary`: final accuracies and costs, see [`crate::pipeline::Summary`]
//!
//! Records hold no timestamps or durations, so equal runs give equal bytes.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::{Result, SdqError};

pub struct MetricsSink {
    path: PathBuf,
    file: File,
}

impl MetricsSink {
    /// Creates (truncating) a log at `path`.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| SdqError::io(path, e))?;
        Ok(MetricsSink {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| SdqError::io(path, e))?;
        Ok(MetricsSink {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn emit<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record)
            .map_err(|e| SdqError::contract(format!("metrics record does not serialize: {e}")))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| SdqError::io(&self.path, e))
    }

    pub fn emit_all<T: Serialize>(&mut self, records: &[T]) -> Result<()> {
        records.iter().try_for_each(|r| self.emit(r))
    }
}

/// Reads every record of a metrics log.
pub fn read_records(path: &Path) -> Result<Vec<Value>> {
    let f = File::open(path).map_err(|e| SdqError::io(path, e))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| SdqError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| SdqError::parse(&name, i + 1, e.to_string()))?;
        if v.get("phase").and_then(Value::as_str).is_none() {
            return Err(SdqError::parse(&name, i + 1, "record without a \"phase\" tag"));
        }
        out.push(v);
    }
    Ok(out)
}

/// Records whose `"phase"` equals `phase`.
pub fn records_of<'a>(records: &'a [Value], phase: &'a str) -> impl Iterator<Item = &'a Value> + 'a {
    records
        .iter()
        .filter(move |r| r.get("phase").and_then(Value::as_str) == Some(phase))
}
