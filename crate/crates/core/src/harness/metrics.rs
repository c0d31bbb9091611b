use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::Phase;
use crate::error::Result;

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: f64,
    pub c_hat: f64,
    pub top1: f64,
}

/// Receives per-iteration compression rates and per-epoch records.
pub trait MetricsSink {
    fn c_hat(&mut self, _iteration: u64, _c_hat: f64) -> Result<()> {
        Ok(())
    }
    fn epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {}

/// Appends epoch records as JSON lines.
pub struct JsonLinesSink {
    path: PathBuf,
}

impl JsonLinesSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        JsonLinesSink { path: path.into() }
    }
}

impl MetricsSink for JsonLinesSink {
    fn epoch(&mut self, record: &EpochRecord) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }
}

pub fn read_json_lines(path: &Path) -> Result<Vec<EpochRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Rewrites `path` to hold exactly `records`.
pub fn write_json_lines(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    super::write_atomic(path, s.as_bytes())
}
