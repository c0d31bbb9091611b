//! Data ingestion, augmentation, schedules, evaluation and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use config::{Profile, RunConfig};
pub use data::{augment_train, load_cifar10, synthetic_cifar, write_cifar_layout, Dataset, Normalization};
pub use metrics::{EpochRecord, JsonLinesSink, MetricsSink, NullSink};

use std::path::Path;

use ndarray::Axis;

use crate::network::Network;
use crate::{Result, Scalar};

/// Writes `bytes` to a temporary sibling, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Step decay: `base_lr · 0.1^k` where `k` counts the passed milestones at
/// 50% and 75% of `total_epochs`.
pub fn lr_at(epoch: usize, base_lr: f64, total_epochs: usize) -> f64 {
    let e = epoch as f64;
    let t = total_epochs as f64;
    let passed = [0.5, 0.75].iter().filter(|&&m| e >= m * t).count();
    base_lr * 0.1f64.powi(passed as i32)
}

/// Top-1 accuracy in inference mode, as a fraction in `[0, 1]`.
pub fn evaluate<T: Scalar>(net: &mut Network<T>, data: &Dataset, norm: &Normalization, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (x, labels) = data.batch::<T>(chunk, norm, None);
        let logits = net.forward(&x, false)?;
        for (row, &label) in logits.axis_iter(Axis(0)).zip(&labels) {
            if argmax(row.iter().copied()) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Index of the first maximum.
pub fn argmax<T: PartialOrd>(values: impl Iterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.enumerate() {
        match &best {
            Some((_, b)) if !(v > *b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |(i, _)| i)
}
