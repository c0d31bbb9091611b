//! Versioned single-file checkpoints.
//!
//! Layout (little endian): magic `LAPPCKPT`, `u32` schema version, `u64`
//! metadata length, JSON metadata, `u64` tensor count, then per tensor its
//! name, kind code, shape, values and momentum buffer as `f64`. A SHA-256
//! digest of everything before it closes the file.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::data::Normalization;
use super::metrics::EpochRecord;
use super::write_atomic;
use crate::controller::{PruneRunState, RngState, Trainer};
use crate::error::{LappError, Result};
use crate::flops::{BypassKind, BypassSpec};
use crate::masking::{MaskBundle, MaskRecord};
use crate::network::{ArchSpec, ConvUnit, Network};
use crate::nn::{Linear, ParamKind, Visit};
use crate::sbc::{ConvBn, SbcModule};
use crate::surgery::compact_sparse_path;
use crate::Scalar;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LAPPCKPT";
const DIGEST_LEN: usize = 32;

/// Structure of one conv position, enough to rebuild an empty skeleton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "unit", rename_all = "snake_case")]
pub enum UnitRecord {
    Plain,
    Sbc { bypass: BypassSpec, mask: MaskRecord, mask_live: bool },
    Compact { bypass: BypassSpec, kept: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    /// Element type of the live network (`f32` or `f64`).
    pub precision: String,
    /// Free-form tag such as `latest`, `pre_surgery` or `post_surgery`.
    pub label: String,
    pub config: RunConfig,
    pub norm: Normalization,
    pub arch: ArchSpec,
    pub units: Vec<UnitRecord>,
    pub state: PruneRunState,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub network: Network<T>,
}

fn precision<T>() -> String {
    std::any::type_name::<T>().to_string()
}

fn unit_records<T: Scalar>(net: &Network<T>) -> Vec<UnitRecord> {
    net.units
        .iter()
        .map(|u| match u {
            ConvUnit::Plain(_) => UnitRecord::Plain,
            ConvUnit::Sbc(m) => {
                UnitRecord::Sbc { bypass: m.bypass_spec(), mask: MaskRecord::from(&m.mask), mask_live: m.mask_live }
            }
            ConvUnit::Compact(m) => UnitRecord::Compact { bypass: m.bypass.spec(), kept: m.kept.clone() },
        })
        .collect()
}

impl<T: Scalar> Checkpoint<T> {
    /// Snapshot of `network` together with the trainer's run state.
    pub fn of(trainer: &Trainer<T>, network: &Network<T>, label: &str) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                schema_version: CHECKPOINT_SCHEMA_VERSION,
                precision: precision::<T>(),
                label: label.to_string(),
                config: trainer.config.clone(),
                norm: trainer.norm,
                arch: network.arch.clone(),
                units: unit_records(network),
                state: trainer.state.clone(),
                rng: RngState::capture(&trainer.rng),
                history: trainer.history.clone(),
            },
            network: network.clone(),
        }
    }

    pub fn from_trainer(trainer: &Trainer<T>, label: &str) -> Self {
        Self::of(trainer, &trainer.net, label)
    }

    /// Resumable trainer; the surgery pair is not part of a checkpoint.
    pub fn into_trainer(self) -> Result<Trainer<T>> {
        Ok(Trainer {
            rng: self.meta.rng.restore()?,
            config: self.meta.config,
            norm: self.meta.norm,
            net: self.network,
            state: self.meta.state,
            history: self.meta.history,
            surgery_pair: None,
        })
    }
}

fn tensor_bytes<T: Scalar>(net: &Network<T>, out: &mut Vec<u8>) {
    let mut count = 0u64;
    let mut body = Vec::new();
    net.visit("", &mut |name, p| {
        count += 1;
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.push(p.kind.code());
        body.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.iter().chain(p.velocity.iter()) {
            body.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    });
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut meta = ckpt.meta.clone();
    meta.units = unit_records(&ckpt.network);
    meta.arch = ckpt.network.arch.clone();
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(json.len() + (1 << 16));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&meta.schema_version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    tensor_bytes(&ckpt.network, &mut out);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LappError::Checkpoint("truncated checkpoint body".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| LappError::Checkpoint("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

struct StoredTensor {
    kind: ParamKind,
    shape: Vec<usize>,
    value: Vec<f64>,
    velocity: Vec<f64>,
}

/// Rebuilds a network with the recorded structure and placeholder weights.
fn skeleton<T: Scalar>(arch: &ArchSpec, units: &[UnitRecord]) -> Result<Network<T>> {
    let convs = arch.conv_layers();
    if units.len() != convs.len() {
        return Err(LappError::Checkpoint(format!("{} unit records for {} conv layers", units.len(), convs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut built = Vec::with_capacity(units.len());
    for (l, rec) in convs.iter().zip(units) {
        let sbc = |b: &BypassSpec, rng: &mut ChaCha8Rng| {
            let d = if b.kind == BypassKind::V1 { l.c_out } else { b.width };
            SbcModule::<T>::new(l.c_in, l.c_out, l.k, l.stride, b.kind, d, rng)
        };
        built.push(match rec {
            UnitRecord::Plain => ConvUnit::Plain(ConvBn::new(l.c_in, l.c_out, l.k, l.stride, &mut rng)),
            UnitRecord::Sbc { bypass, mask, mask_live } => {
                let mut m = sbc(bypass, &mut rng)?;
                m.freeze_mask(&mask.hard_mask)?;
                m.mask = MaskBundle { threshold: T::lit(mask.threshold), ..m.mask };
                m.mask_live = *mask_live;
                ConvUnit::Sbc(m)
            }
            UnitRecord::Compact { bypass, kept } => {
                let mut hard = vec![false; l.c_out];
                for &i in kept {
                    *hard.get_mut(i).ok_or_else(|| LappError::Checkpoint(format!("kept index {i} out of range")))? =
                        true;
                }
                ConvUnit::Compact(compact_sparse_path(&sbc(bypass, &mut rng)?, &hard)?)
            }
        });
    }
    let fc = arch.classifier();
    Ok(Network::new(arch.clone(), built, Linear::new(fc.c_in, fc.c_out, &mut rng)))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let bad = |m: &str| LappError::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut cur = Cursor { bytes: body, pos: MAGIC.len() };
    let version = cur.u32()?;
    if version != CHECKPOINT_SCHEMA_VERSION {
        return Err(LappError::Checkpoint(format!(
            "schema version {version} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})"
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("integrity digest mismatch; file is corrupted or truncated"));
    }
    let meta_len = cur.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)?;
    if meta.precision != precision::<T>() {
        return Err(LappError::Checkpoint(format!(
            "checkpoint holds {} tensors, requested {}",
            meta.precision,
            precision::<T>()
        )));
    }
    let count = cur.u64()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let kind = ParamKind::from_code(cur.take(1)?[0]).ok_or_else(|| bad("unknown tensor kind"))?;
        let ndim = cur.u32()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let len = shape.iter().product();
        let value = cur.f64s(len)?;
        let velocity = cur.f64s(len)?;
        tensors.insert(name, StoredTensor { kind, shape, value, velocity });
    }
    if cur.pos != body.len() {
        return Err(bad("trailing bytes after tensors"));
    }
    let mut network = skeleton::<T>(&meta.arch, &meta.units)?;
    let mut problem: Option<String> = None;
    network.visit_mut("", &mut |name, p| {
        if problem.is_some() {
            return;
        }
        let Some(t) = tensors.remove(name) else {
            problem = Some(format!("tensor {name} missing"));
            return;
        };
        if t.kind != p.kind || t.shape != p.value.shape() {
            problem = Some(format!("tensor {name} has kind {:?} shape {:?}, expected {:?} {:?}", t.kind, t.shape, p.kind, p.value.shape()));
            return;
        }
        let to_t = |v: Vec<f64>| {
            ArrayD::from_shape_vec(IxDyn(&t.shape), v.into_iter().map(T::lit).collect()).expect("shape checked")
        };
        p.value = to_t(t.value);
        p.velocity = to_t(t.velocity);
        p.zero_grad();
    });
    if let Some(m) = problem {
        return Err(LappError::Checkpoint(m));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(LappError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { meta, network })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path)
        .map_err(|e| LappError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        LappError::Checkpoint(m) => LappError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
