//! Conversion of a masked SBC network into a compact network.
//!
//! Kept filters (and their normalization channels) are gathered into a
//! narrow sparse path whose output is scatter-added into the bypass output
//! at the kept channel positions. Because masks act after normalization, the
//! compact network reproduces the masked network exactly, up to float
//! reassociation.

use ndarray::{s, Array1, Array4, Axis, Ix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::flops::LayerSpec;
use crate::network::{ArchName, ConvUnit, Network};
use crate::nn::{join, relu, Param, Visit};
use crate::sbc::{Bypass, ConvBn, SbcModule};
use crate::Scalar;

/// Ascending, zero-based positions of the ones in a hard mask.
pub fn kept_indices(hard: &[bool]) -> Vec<usize> {
    hard.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

pub fn kept_indices_of<T: Scalar>(mask: &Array1<T>) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m == T::one()).map(|(i, _)| i).collect()
}

#[derive(Clone, Debug)]
pub struct CompactModule<T> {
    /// Gathered kept filters; `None` when every filter was pruned.
    pub sparse: Option<ConvBn<T>>,
    pub kept: Vec<usize>,
    pub bypass: Bypass<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl<T: Scalar> CompactModule<T> {
    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array4<T>> {
        let mut y = self.bypass.forward(x, train)?;
        if let Some(sparse) = &mut self.sparse {
            let ys = sparse.forward(x, train)?;
            for (j, &c) in self.kept.iter().enumerate() {
                let mut dst = y.slice_mut(s![.., c, .., ..]);
                dst += &ys.slice(s![.., j, .., ..]);
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let mut dx = self.bypass.backward(dy);
        if let Some(sparse) = &mut self.sparse {
            let dys = dy.select(Axis(1), &self.kept);
            dx += &sparse.backward(&dys);
        }
        dx
    }

    pub fn macs(&self, h_out: usize, w_out: usize) -> u64 {
        let sparse = self.sparse.as_ref().map_or(0, |s| s.conv.macs(h_out, w_out));
        sparse + self.bypass.macs(h_out, w_out, self.stride)
    }

    pub fn params(&self) -> u64 {
        self.sparse.as_ref().map_or(0, ConvBn::params) + self.bypass.params()
    }

    /// The pre-surgery layer spec this module replaced.
    pub fn original_spec(&self, layer: &LayerSpec) -> LayerSpec {
        let mut s = layer.clone();
        s.c_in = self.c_in;
        s.c_out = self.c_out;
        s.k = self.kernel;
        s.stride = self.stride;
        s
    }

    /// Kept filters scattered back to full width, zeros elsewhere.
    pub fn scattered_weights(&self) -> Array4<T> {
        let k = self.kernel;
        let mut w = Array4::zeros((self.c_out, self.c_in, k, k));
        if let Some(sparse) = &self.sparse {
            let kept_w = sparse.conv.weight.value.view().into_dimensionality::<Ix4>().expect("4-d");
            for (j, &c) in self.kept.iter().enumerate() {
                w.slice_mut(s![c, .., .., ..]).assign(&kept_w.slice(s![j, .., .., ..]));
            }
        }
        w
    }
}

impl<T: Scalar> Visit<T> for CompactModule<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(sparse) = &self.sparse {
            sparse.visit(&join(prefix, "sparse"), f);
        }
        self.bypass.visit(&join(prefix, "bypass"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(sparse) = &mut self.sparse {
            sparse.visit_mut(&join(prefix, "sparse"), f);
        }
        self.bypass.visit_mut(&join(prefix, "bypass"), f);
    }
}

/// Gathers the kept filters of `module` into a compact module; the bypass is copied unchanged.
pub fn compact_sparse_path<T: Scalar>(module: &SbcModule<T>, mask: &[bool]) -> Result<CompactModule<T>> {
    if mask.len() != module.c_out() {
        return Err(shape(format!("mask of length {} for {} filters", mask.len(), module.c_out())));
    }
    let kept = kept_indices(mask);
    let sparse = if kept.is_empty() { None } else { Some(module.sparse.select_out_channels(&kept)) };
    Ok(CompactModule {
        sparse,
        kept,
        bypass: module.bypass.clone(),
        c_in: module.c_in(),
        c_out: module.c_out(),
        kernel: module.kernel(),
        stride: module.stride,
    })
}

/// `relu` of the compact module output in inference mode.
pub fn compact_forward<T: Scalar>(module: &mut CompactModule<T>, x: &Array4<T>) -> Result<Array4<T>> {
    Ok(relu(module.forward(x, false)?))
}

/// Compacts every SBC module using its current hard mask. Other layers,
/// and the momentum buffers of kept parameters, carry over unchanged.
pub fn convert<T: Scalar>(net: &Network<T>) -> Result<Network<T>> {
    let masks: Vec<Vec<bool>> = net.sbc_modules().map(|m| m.mask.hard_bits()).collect();
    convert_with_masks(net, &masks)
}

/// Like [`convert`] with explicit masks, one per SBC module in order.
pub fn convert_with_masks<T: Scalar>(net: &Network<T>, masks: &[Vec<bool>]) -> Result<Network<T>> {
    let count = net.sbc_modules().count();
    if masks.len() != count {
        return Err(shape(format!("{} masks for {count} modules", masks.len())));
    }
    let mut masks = masks.iter();
    let mut units = Vec::with_capacity(net.units.len());
    for u in &net.units {
        units.push(match u {
            ConvUnit::Sbc(m) => ConvUnit::Compact(compact_sparse_path(m, masks.next().expect("counted"))?),
            other => other.clone(),
        });
    }
    Ok(Network::new(net.arch.clone(), units, net.classifier.clone()))
}

/// Maximum absolute logit difference between two networks on `inputs`, in inference mode.
pub fn equivalence_check<T: Scalar>(a: &mut Network<T>, b: &mut Network<T>, inputs: &Array4<T>) -> Result<f64> {
    const CHUNK: usize = 16;
    let n = inputs.dim().0;
    let mut worst = 0.0f64;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let x = inputs.slice(s![start..end, .., .., ..]).to_owned();
        let ya = a.forward(&x, false)?;
        let yb = b.forward(&x, false)?;
        if ya.dim() != yb.dim() {
            return Err(shape("networks produce different logit shapes"));
        }
        for (p, q) in ya.iter().zip(yb.iter()) {
            worst = worst.max((p.as_f64() - q.as_f64()).abs());
        }
        start = end;
    }
    Ok(worst)
}

/// Standard-normal-scale random CIFAR-shaped inputs.
pub fn random_inputs<T: Scalar>(sample_count: usize, seed: u64) -> Array4<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((sample_count, 3, 32, 32), || T::lit(rng.random_range(-2.0..2.0)))
}

pub fn equivalence_check_random<T: Scalar>(
    a: &mut Network<T>,
    b: &mut Network<T>,
    sample_count: usize,
    seed: u64,
) -> Result<f64> {
    equivalence_check(a, b, &random_inputs(sample_count, seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub c_out: usize,
    pub kept: usize,
    pub rate: f64,
    pub bypass_width: Option<usize>,
    pub kept_indices: Vec<usize>,
}

/// Per-module record of a surgery, plus network-level FLOPs and parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurgeryManifest {
    pub arch: ArchName,
    pub modules: Vec<ManifestEntry>,
    pub flops_baseline: u64,
    pub flops_compact: u64,
    pub params_baseline: u64,
    pub params_compact: u64,
}

impl SurgeryManifest {
    pub fn build<T: Scalar>(compact: &Network<T>) -> Result<Self> {
        let layers = &compact.arch.layers;
        let modules = compact
            .prunable_units()
            .map(|(i, u)| {
                let l = &layers[i];
                let kept_indices = match u {
                    ConvUnit::Compact(m) => m.kept.clone(),
                    ConvUnit::Sbc(m) => kept_indices(&m.mask.hard_bits()),
                    ConvUnit::Plain(p) => (0..p.out_channels()).collect(),
                };
                ManifestEntry {
                    name: l.name.clone(),
                    c_out: l.c_out,
                    kept: kept_indices.len(),
                    rate: 1.0 - kept_indices.len() as f64 / l.c_out as f64,
                    bypass_width: u.bypass_spec().map(|b| b.width),
                    kept_indices,
                }
            })
            .collect();
        let prunable = layers.iter().filter(|l| l.prunable).count();
        let full: Vec<usize> = layers.iter().filter(|l| l.prunable).map(|l| l.c_out).collect();
        Ok(SurgeryManifest {
            arch: compact.arch.name,
            modules,
            flops_baseline: compact.baseline_flops()?,
            flops_compact: compact.structural_flops(),
            params_baseline: crate::flops::params_count(layers, &full, &vec![None; prunable])?,
            params_compact: compact.structural_params(),
        })
    }

    pub fn flops_reduction_percent(&self) -> f64 {
        100.0 * (1.0 - self.flops_compact as f64 / self.flops_baseline as f64)
    }

    pub fn params_reduction_percent(&self) -> f64 {
        100.0 * (1.0 - self.params_compact as f64 / self.params_baseline as f64)
    }

    pub fn rates(&self) -> Vec<f64> {
        self.modules.iter().map(|m| m.rate).collect()
    }
}
