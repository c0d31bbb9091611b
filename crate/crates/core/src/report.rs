//! Run reports: per-layer table, FLOPs and parameter reductions, and the
//! compression-rate and accuracy series.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::PruneRunState;
use crate::error::{LappError, Result};
use crate::flops::BypassKind;
use crate::harness::{write_atomic, EpochRecord, RunConfig};
use crate::network::ArchName;
use crate::surgery::SurgeryManifest;

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const PRE_SURGERY_FILE: &str = "pre_surgery.ckpt";
pub const POST_SURGERY_FILE: &str = "post_surgery.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const C_HAT_SERIES_FILE: &str = "c_hat.csv";
pub const ACCURACY_SERIES_FILE: &str = "accuracy.csv";

/// Files a completed run directory must hold.
pub const RUN_ARTIFACTS: [&str; 7] =
    [CONFIG_FILE, CHECKPOINT_FILE, PRE_SURGERY_FILE, POST_SURGERY_FILE, MANIFEST_FILE, METRICS_FILE, REPORT_FILE];

/// Spread below which per-layer rates count as uniform.
pub const ADAPTIVE_EPSILON: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub c_out: usize,
    pub kept: usize,
    pub rate: f64,
    pub bypass_width: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub arch: ArchName,
    pub c_target: f64,
    pub bypass: BypassKind,
    pub uniform: bool,
    pub layers: Vec<LayerRow>,
    pub flops_before: u64,
    pub flops_after: u64,
    pub flops_reduction_percent: f64,
    pub params_before: u64,
    pub params_after: u64,
    pub params_reduction_percent: f64,
    pub final_c_hat: f64,
    pub final_top1: f64,
    pub surgery_epoch: Option<usize>,
    pub c_hat_trajectory: Vec<(u64, f64)>,
    pub accuracy_trajectory: Vec<(usize, f64)>,
}

impl RunReport {
    pub fn build(config: &RunConfig, manifest: &SurgeryManifest, state: &PruneRunState, history: &[EpochRecord]) -> Self {
        let layers = manifest
            .modules
            .iter()
            .map(|m| LayerRow {
                name: m.name.clone(),
                c_out: m.c_out,
                kept: m.kept,
                rate: m.rate,
                bypass_width: m.bypass_width,
            })
            .collect();
        RunReport {
            arch: config.arch,
            c_target: config.c_target,
            bypass: config.bypass,
            uniform: config.uniform,
            layers,
            flops_before: manifest.flops_baseline,
            flops_after: manifest.flops_compact,
            flops_reduction_percent: manifest.flops_reduction_percent(),
            params_before: manifest.params_baseline,
            params_after: manifest.params_compact,
            params_reduction_percent: manifest.params_reduction_percent(),
            final_c_hat: manifest.flops_compact as f64 / manifest.flops_baseline as f64,
            final_top1: history.last().map_or(0.0, |r| r.top1),
            surgery_epoch: state.surgery_epoch,
            c_hat_trajectory: state.c_hat_trajectory.clone(),
            accuracy_trajectory: history.iter().map(|r| (r.epoch, r.top1)).collect(),
        }
    }

    pub fn rates(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.rate).collect()
    }

    pub fn rate_std(&self) -> f64 {
        population_std(&self.rates())
    }

    pub fn layer_adaptive(&self) -> bool {
        self.rate_std() > ADAPTIVE_EPSILON
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let mode = if self.uniform { "uniform" } else { "learned thresholds" };
        let _ = writeln!(s, "arch {}  target C {}  bypass {}  mode {mode}", self.arch, self.c_target, self.bypass);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<24} {:>6} {:>6} {:>8} {:>6}", "layer", "c", "n", "p", "d");
        for l in &self.layers {
            let d = l.bypass_width.map_or("-".to_string(), |d| d.to_string());
            let _ = writeln!(s, "{:<24} {:>6} {:>6} {:>8.4} {:>6}", l.name, l.c_out, l.kept, l.rate, d);
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "FLOPs   {} -> {}  ({:.2}% reduction)",
            self.flops_before, self.flops_after, self.flops_reduction_percent
        );
        let _ = writeln!(
            s,
            "params  {} -> {}  ({:.2}% reduction)",
            self.params_before, self.params_after, self.params_reduction_percent
        );
        let _ = writeln!(s, "final compression rate {:.6}", self.final_c_hat);
        let _ = writeln!(s, "final top1 {:.2}%", 100.0 * self.final_top1);
        match self.surgery_epoch {
            Some(e) => {
                let _ = writeln!(s, "surgery epoch {e}");
            }
            None => {
                let _ = writeln!(s, "surgery epoch none");
            }
        }
        let _ = writeln!(
            s,
            "layer-adaptive: {} (std of rates {:.4})",
            if self.layer_adaptive() { "yes" } else { "no" },
            self.rate_std()
        );
        s
    }

    /// Writes `c_hat.csv` and `accuracy.csv` into `dir`.
    pub fn write_series(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iteration", "c_hat"])?;
        for (i, c) in &self.c_hat_trajectory {
            w.write_record([i.to_string(), c.to_string()])?;
        }
        write_atomic(&dir.join(C_HAT_SERIES_FILE), &finish(w)?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "top1"])?;
        for (e, a) in &self.accuracy_trajectory {
            w.write_record([e.to_string(), a.to_string()])?;
        }
        write_atomic(&dir.join(ACCURACY_SERIES_FILE), &finish(w)?)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| LappError::Artifact(e.to_string()))
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Expected artifacts absent from `dir`.
pub fn missing_artifacts(dir: &Path) -> Vec<PathBuf> {
    RUN_ARTIFACTS.iter().map(|f| dir.join(f)).filter(|p| !p.exists()).collect()
}

/// Loads `report.json`, rewrites the text table and series files next to it.
pub fn render_run_dir(dir: &Path) -> Result<RunReport> {
    let missing = missing_artifacts(dir);
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(LappError::Artifact(format!("incomplete run directory, missing: {}", list.join(", "))));
    }
    let report: RunReport = serde_json::from_slice(&std::fs::read(dir.join(REPORT_FILE))?)?;
    let manifest: SurgeryManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.flops_compact != report.flops_after || manifest.flops_baseline != report.flops_before {
        return Err(LappError::Artifact("report and manifest disagree on FLOPs".into()));
    }
    write_atomic(&dir.join(REPORT_TEXT_FILE), report.render_text().as_bytes())?;
    report.write_series(dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_of_constant_rates_is_zero() {
        assert_eq!(population_std(&[0.5, 0.5, 0.5]), 0.0);
        assert!((population_std(&[0.0, 1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_dir_lists_everything() {
        let dir = tempfile::tempdir().unwrap();
        let err = render_run_dir(dir.path()).unwrap_err().to_string();
        for f in RUN_ARTIFACTS {
            assert!(err.contains(f), "{f} not listed in {err}");
        }
    }
}
