//! Run configuration and its flat `key = value` document form.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::Normalization;
use crate::error::{LappError, Result};
use crate::flops::BypassKind;
use crate::network::ArchName;

/// Environment variable consulted when no data directory is configured.
pub const DATA_DIR_ENV: &str = "LAPP_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 120 epochs, prune cap 40.
    Desk,
    /// 400 epochs, prune cap 40.
    Paper,
    /// Two epochs on a few hundred images, with regularizer weights raised so
    /// the prune phase fits in one short epoch. Exercises the pipeline only.
    Smoke,
}

impl FromStr for Profile {
    type Err = LappError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            "smoke" => Ok(Profile::Smoke),
            _ => Err(LappError::Usage(format!("unknown profile {s:?} (expected desk, paper or smoke)"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
            Profile::Smoke => "smoke",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub arch: ArchName,
    pub c_target: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total_epochs: usize,
    pub prune_epoch_cap: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub bypass: BypassKind,
    /// Shared-rate pruning before training instead of learned thresholds.
    pub uniform: bool,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Use only the first `n` training images.
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Channel statistics; filled from the training split when absent.
    pub norm: Option<Normalization>,
}

pub const KEYS: [&str; 20] = [
    "profile",
    "arch",
    "target_c",
    "lambda1",
    "lambda2",
    "epochs",
    "prune_epoch_cap",
    "batch_size",
    "base_lr",
    "momentum",
    "weight_decay",
    "bypass",
    "uniform",
    "seed",
    "data_dir",
    "out_dir",
    "train_subset",
    "test_subset",
    "norm_mean",
    "norm_std",
];

fn default_lambda1(arch: ArchName) -> f64 {
    match arch {
        ArchName::Resnet20 => 3e-5,
        _ => 2e-5,
    }
}

impl RunConfig {
    pub fn new(profile: Profile, arch: ArchName) -> Self {
        let mut c = RunConfig {
            profile,
            arch,
            c_target: 0.4,
            lambda1: default_lambda1(arch),
            lambda2: 1.0,
            total_epochs: 120,
            prune_epoch_cap: 40,
            batch_size: 128,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            bypass: BypassKind::V2,
            uniform: false,
            seed: 0,
            data_dir: PathBuf::new(),
            out_dir: PathBuf::from("runs/latest"),
            train_subset: None,
            test_subset: None,
            norm: None,
        };
        match profile {
            Profile::Desk => {}
            Profile::Paper => c.total_epochs = 400,
            Profile::Smoke => {
                c.total_epochs = 2;
                c.prune_epoch_cap = 1;
                c.batch_size = 16;
                c.lambda1 = 3e-3;
                c.lambda2 = 10.0;
                c.train_subset = Some(512);
                c.test_subset = Some(256);
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LappError::Usage(m));
        if !(self.c_target > 0.0 && self.c_target < 1.0) {
            return bad(format!("target_c {} outside (0, 1)", self.c_target));
        }
        if self.total_epochs <= self.prune_epoch_cap {
            return bad(format!(
                "epochs ({}) must exceed prune_epoch_cap ({})",
                self.total_epochs, self.prune_epoch_cap
            ));
        }
        if self.prune_epoch_cap == 0 {
            return bad("prune_epoch_cap must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if matches!(self.train_subset, Some(0)) || matches!(self.test_subset, Some(0)) {
            return bad("subset sizes must be at least 1".into());
        }
        Ok(())
    }

    /// Builds a configuration from `key = value` entries applied in order
    /// (later entries win). `profile` and `arch` are read first because they
    /// select defaults.
    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let unknown: Vec<&str> =
            entries.iter().map(|(k, _)| k.as_str()).filter(|k| !KEYS.contains(k)).collect();
        if !unknown.is_empty() {
            return Err(LappError::Usage(format!(
                "unknown configuration keys: {} (known: {})",
                unknown.join(", "),
                KEYS.join(", ")
            )));
        }
        let last = |key: &str| entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let profile = last("profile").map(Profile::from_str).transpose()?.unwrap_or(Profile::Desk);
        let arch = last("arch").map(ArchName::from_str).transpose()?.unwrap_or(ArchName::Resnet20);
        let mut c = RunConfig::new(profile, arch);
        let mut mean = None;
        let mut std = None;
        for (k, v) in entries {
            let v = v.as_str();
            match k.as_str() {
                "profile" | "arch" => {}
                "target_c" => c.c_target = num(k, v)?,
                "lambda1" => c.lambda1 = num(k, v)?,
                "lambda2" => c.lambda2 = num(k, v)?,
                "epochs" => c.total_epochs = num(k, v)?,
                "prune_epoch_cap" => c.prune_epoch_cap = num(k, v)?,
                "batch_size" => c.batch_size = num(k, v)?,
                "base_lr" => c.base_lr = num(k, v)?,
                "momentum" => c.momentum = num(k, v)?,
                "weight_decay" => c.weight_decay = num(k, v)?,
                "bypass" => c.bypass = v.parse().map_err(|_| LappError::Usage(format!("bypass {v:?} is not v1 or v2")))?,
                "uniform" => c.uniform = num(k, v)?,
                "seed" => c.seed = num(k, v)?,
                "data_dir" => c.data_dir = PathBuf::from(v),
                "out_dir" => c.out_dir = PathBuf::from(v),
                "train_subset" => c.train_subset = optional(k, v)?,
                "test_subset" => c.test_subset = optional(k, v)?,
                "norm_mean" => mean = Some(triple(k, v)?),
                "norm_std" => std = Some(triple(k, v)?),
                _ => unreachable!("keys checked above"),
            }
        }
        c.norm = match (mean, std) {
            (Some(mean), Some(std)) => Some(Normalization { mean, std }),
            (None, None) => None,
            _ => return Err(LappError::Usage("norm_mean and norm_std must be given together".into())),
        };
        if c.data_dir.as_os_str().is_empty() {
            if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
                c.data_dir = PathBuf::from(dir);
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Canonical document; parsing it back yields an equal configuration.
    pub fn to_document(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("profile", self.profile.to_string());
        put("arch", self.arch.to_string());
        put("target_c", self.c_target.to_string());
        put("lambda1", self.lambda1.to_string());
        put("lambda2", self.lambda2.to_string());
        put("epochs", self.total_epochs.to_string());
        put("prune_epoch_cap", self.prune_epoch_cap.to_string());
        put("batch_size", self.batch_size.to_string());
        put("base_lr", self.base_lr.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("bypass", self.bypass.to_string());
        put("uniform", self.uniform.to_string());
        put("seed", self.seed.to_string());
        put("data_dir", self.data_dir.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("train_subset", self.train_subset.map_or("none".into(), |n| n.to_string()));
        put("test_subset", self.test_subset.map_or("none".into(), |n| n.to_string()));
        if let Some(n) = &self.norm {
            let join = |v: &[f32; 3]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            put("norm_mean", join(&n.mean));
            put("norm_std", join(&n.std));
        }
        s
    }
}

fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim().parse().map_err(|_| LappError::Usage(format!("invalid value {v:?} for {key}")))
}

fn optional(key: &str, v: &str) -> Result<Option<usize>> {
    match v.trim() {
        "none" | "" => Ok(None),
        s => num(key, s).map(Some),
    }
}

fn triple(key: &str, v: &str) -> Result<[f32; 3]> {
    let parts: Vec<f32> = v.split(',').map(|p| num(key, p)).collect::<Result<_>>()?;
    parts.try_into().map_err(|_| LappError::Usage(format!("{key} needs three comma-separated values")))
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_document(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| LappError::Usage(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_follow_arch() {
        let c = RunConfig::from_entries(&entries(&[("arch", "resnet20")])).unwrap();
        assert_eq!(c.lambda1, 3e-5);
        assert_eq!((c.total_epochs, c.prune_epoch_cap, c.batch_size), (120, 40, 128));
        assert_eq!((c.momentum, c.weight_decay, c.base_lr, c.lambda2), (0.9, 1e-4, 0.1, 1.0));
        let c = RunConfig::from_entries(&entries(&[("arch", "resnet56")])).unwrap();
        assert_eq!(c.lambda1, 2e-5);
        let c = RunConfig::from_entries(&entries(&[("profile", "paper")])).unwrap();
        assert_eq!(c.total_epochs, 400);
    }

    #[test]
    fn later_entries_win() {
        let c = RunConfig::from_entries(&entries(&[("target_c", "0.3"), ("target_c", "0.5")])).unwrap();
        assert_eq!(c.c_target, 0.5);
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = RunConfig::from_entries(&entries(&[("speed", "1"), ("colour", "red")])).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, LappError::Usage(_)));
        assert!(msg.contains("speed") && msg.contains("colour"));
    }

    #[test]
    fn target_outside_unit_interval_rejected() {
        for v in ["1.5", "0", "1"] {
            assert!(matches!(RunConfig::from_entries(&entries(&[("target_c", v)])), Err(LappError::Usage(_))));
        }
        assert!(RunConfig::from_entries(&entries(&[("epochs", "40")])).is_err());
    }

    #[test]
    fn document_round_trip() {
        let mut c = RunConfig::new(Profile::Smoke, ArchName::ResnetTiny);
        c.norm = Some(Normalization { mean: [0.49, 0.48, 0.45], std: [0.25, 0.24, 0.26] });
        c.bypass = BypassKind::V1;
        c.data_dir = PathBuf::from("/data/cifar");
        let doc = c.to_document();
        let back = RunConfig::from_entries(&parse_document(&doc).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_dashes() {
        let e = parse_document("# run\ntarget-c = 0.3 # tight\n\narch=resnet32\n").unwrap();
        assert_eq!(e, entries(&[("target_c", "0.3"), ("arch", "resnet32")]));
        assert!(parse_document("nonsense").is_err());
    }
}
