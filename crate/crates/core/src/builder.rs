//! Architecture descriptions, baseline networks, SBC networks, and the
//! uniform-rate pruning baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, LappError, Result};
use crate::flops::{self, BypassKind, BypassSpec, LayerSpec};
use crate::masking::importance_l1;
use crate::network::{ArchName, ArchSpec, BasicBlock, ConvUnit, Network, Topology};
use crate::nn::Linear;
use crate::sbc::{select_bypass_width, ConvBn, SbcModule};
use crate::Scalar;

pub const CLASS_COUNT: usize = 10;
const INPUT_EXTENT: usize = 32;

const CIFAR_WIDTHS: [usize; 3] = [16, 32, 64];
const VGG_WIDTHS: [usize; 13] = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];
const VGG_POOL_AFTER: [usize; 4] = [1, 3, 6, 9];

fn resnet_arch(name: ArchName, depth: usize, widths: [usize; 3]) -> ArchSpec {
    let per_stage = (depth - 2) / 6;
    let mut layers = vec![LayerSpec::conv("stem", 3, widths[0], 3, 1, INPUT_EXTENT)];
    let mut blocks = Vec::new();
    let mut width = widths[0];
    let mut extent = INPUT_EXTENT;
    for (stage, &w) in widths.iter().enumerate() {
        for b in 0..per_stage {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            extent /= stride;
            let tag = format!("stage{}.block{}", stage + 1, b);
            let conv1 = layers.len();
            layers.push(LayerSpec::conv(format!("{tag}.conv1"), width, w, 3, stride, extent).prunable());
            let conv2 = layers.len();
            layers.push(LayerSpec::conv(format!("{tag}.conv2"), w, w, 3, 1, extent).prunable());
            let shortcut = (stride != 1 || width != w).then(|| {
                layers.push(LayerSpec::conv(format!("{tag}.shortcut"), width, w, 1, stride, extent));
                layers.len() - 1
            });
            blocks.push(BasicBlock { conv1, conv2, shortcut });
            width = w;
        }
    }
    layers.push(LayerSpec::linear("fc", width, CLASS_COUNT));
    ArchSpec { name, layers, topology: Topology::ResNet { blocks }, class_count: CLASS_COUNT }
}

fn vgg_arch() -> ArchSpec {
    let mut layers = Vec::new();
    let mut pool_after = Vec::new();
    let mut c_in = 3;
    let mut extent = INPUT_EXTENT;
    for (i, &w) in VGG_WIDTHS.iter().enumerate() {
        let mut l = LayerSpec::conv(format!("conv{i}"), c_in, w, 3, 1, extent);
        l.prunable = i > 0;
        layers.push(l);
        let pool = VGG_POOL_AFTER.contains(&i);
        if pool {
            extent /= 2;
        }
        pool_after.push(pool);
        c_in = w;
    }
    layers.push(LayerSpec::linear("fc", c_in, CLASS_COUNT));
    ArchSpec { name: ArchName::Vgg16Cifar, layers, topology: Topology::Vgg { pool_after }, class_count: CLASS_COUNT }
}

/// Static layer graph of a named architecture.
pub fn arch_spec(name: ArchName) -> ArchSpec {
    match name {
        ArchName::Resnet20 => resnet_arch(name, 20, CIFAR_WIDTHS),
        ArchName::Resnet32 => resnet_arch(name, 32, CIFAR_WIDTHS),
        ArchName::Resnet56 => resnet_arch(name, 56, CIFAR_WIDTHS),
        ArchName::ResnetTiny => resnet_arch(name, 8, [8, 16, 32]),
        ArchName::Vgg16Cifar => vgg_arch(),
    }
}

fn classifier<T: Scalar>(arch: &ArchSpec, rng: &mut ChaCha8Rng) -> Linear<T> {
    let fc = arch.classifier();
    Linear::new(fc.c_in, fc.c_out, rng)
}

/// Plain network with every layer dense; same seed gives the same weights.
pub fn build_baseline<T: Scalar>(name: ArchName, seed: u64) -> Network<T> {
    let arch = arch_spec(name);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = arch
        .conv_layers()
        .iter()
        .map(|l| ConvUnit::Plain(ConvBn::new(l.c_in, l.c_out, l.k, l.stride, &mut rng)))
        .collect();
    let fc = classifier(&arch, &mut rng);
    Network::new(arch, units, fc)
}

/// Every prunable layer becomes an SBC module with a bypass of width
/// [`select_bypass_width`] and a zero threshold.
pub fn build_sbcnet<T: Scalar>(baseline: &ArchSpec, c_target: f64, kind: BypassKind, seed: u64) -> Result<Network<T>> {
    baseline.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut units = Vec::with_capacity(baseline.layers.len() - 1);
    for l in baseline.conv_layers() {
        units.push(if l.prunable {
            let d = select_bypass_width(l.c_out, c_target);
            ConvUnit::Sbc(SbcModule::new(l.c_in, l.c_out, l.k, l.stride, kind, d, &mut rng)?)
        } else {
            ConvUnit::Plain(ConvBn::new(l.c_in, l.c_out, l.k, l.stride, &mut rng))
        });
    }
    let fc = classifier(baseline, &mut rng);
    Ok(Network::new(baseline.clone(), units, fc))
}

/// Shared pruning rate and the per-layer kept counts it implies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformPlan {
    pub rate: f64,
    pub kept: Vec<usize>,
    pub flops: u64,
    pub c_hat: f64,
}

fn uniform_kept(arch: &[LayerSpec], rate: f64) -> Vec<usize> {
    arch.iter()
        .filter(|l| l.prunable)
        .map(|l| (((1.0 - rate) * l.c_out as f64).ceil() as usize).clamp(1, l.c_out))
        .collect()
}

/// Smallest shared rate `p` (found by bisection) whose kept counts
/// `⌈(1−p)c⌉` bring the network, bypasses included, to at most
/// `c_target · T_total`.
pub fn uniform_prune_plan(arch: &[LayerSpec], bypass: &[Option<BypassSpec>], c_target: f64) -> Result<UniformPlan> {
    if !(c_target > 0.0 && c_target <= 1.0) {
        return Err(domain(format!("target compression rate {c_target} outside (0, 1]")));
    }
    let t_total = flops::network_total_flops(arch)?;
    let budget = c_target * t_total as f64;
    let cost = |rate: f64| -> Result<u64> { flops::masked_network_flops(arch, &uniform_kept(arch, rate), bypass) };
    let plan = |rate: f64| -> Result<UniformPlan> {
        let kept = uniform_kept(arch, rate);
        let f = flops::masked_network_flops(arch, &kept, bypass)?;
        Ok(UniformPlan { rate, kept, flops: f, c_hat: flops::compression_rate(f, t_total)? })
    };
    if cost(0.0)? as f64 <= budget {
        return plan(0.0);
    }
    if cost(1.0)? as f64 > budget {
        return Err(LappError::Infeasible(format!(
            "even one filter per layer costs {:.4} of the baseline, above target {c_target}",
            cost(1.0)? as f64 / t_total as f64
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cost(mid)? as f64 <= budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    plan(hi)
}

/// Freezes each SBC module's mask to its `kept[j]` filters of largest ℓ1 norm
/// (ties broken by lower index).
pub fn apply_uniform_plan<T: Scalar>(net: &mut Network<T>, plan: &UniformPlan) -> Result<()> {
    let modules: Vec<&mut SbcModule<T>> = net.sbc_modules_mut().collect();
    if modules.len() != plan.kept.len() {
        return Err(domain(format!("plan has {} layers, network has {} modules", plan.kept.len(), modules.len())));
    }
    for (m, &n) in modules.into_iter().zip(&plan.kept) {
        let imp = importance_l1(m.sparse_weights())?;
        let mut order: Vec<usize> = (0..imp.len()).collect();
        order.sort_by(|&a, &b| imp[b].partial_cmp(&imp[a]).expect("finite importance").then(a.cmp(&b)));
        let mut hard = vec![false; imp.len()];
        for &i in order.iter().take(n) {
            hard[i] = true;
        }
        m.freeze_mask(&hard)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet20_enumeration() {
        let a = arch_spec(ArchName::Resnet20);
        a.validate().unwrap();
        assert_eq!(a.prunable_indices().len(), 18);
        assert_eq!(a.layers.iter().filter(|l| l.name.ends_with("shortcut")).count(), 2);
        assert!(!a.layers[0].prunable);
        assert!(!a.classifier().prunable);
        assert!(a.layers.iter().filter(|l| l.name.ends_with("shortcut")).all(|l| !l.prunable));
        assert_eq!(arch_spec(ArchName::Resnet32).prunable_indices().len(), 30);
        assert_eq!(arch_spec(ArchName::Resnet56).prunable_indices().len(), 54);
    }

    #[test]
    fn vgg_enumeration() {
        let a = arch_spec(ArchName::Vgg16Cifar);
        a.validate().unwrap();
        assert_eq!(a.conv_layers().len(), 13);
        assert_eq!(a.prunable_indices().len(), 12);
        assert!(!a.classifier().prunable);
        assert_eq!(a.layers[12].h_out, 2);
    }

    #[test]
    fn builds_are_deterministic() {
        let a = build_baseline::<f32>(ArchName::Resnet20, 7);
        let b = build_baseline::<f32>(ArchName::Resnet20, 7);
        let c = build_baseline::<f32>(ArchName::Resnet20, 8);
        use crate::nn::Visit;
        let collect = |n: &Network<f32>| {
            let mut v = Vec::new();
            n.visit("", &mut |_, p| v.extend(p.value.iter().copied()));
            v
        };
        assert_eq!(collect(&a), collect(&b));
        assert_ne!(collect(&a), collect(&c));
    }

    #[test]
    fn sbcnet_widths_follow_target() {
        let arch = arch_spec(ArchName::Resnet20);
        let net = build_sbcnet::<f32>(&arch, 0.4, BypassKind::V2, 0).unwrap();
        assert_eq!(net.sbc_modules().count(), 18);
        assert!(net.sbc_modules().all(|m| m.bypass.width == m.c_out()));
        let vgg = build_sbcnet::<f32>(&arch_spec(ArchName::Vgg16Cifar), 0.18, BypassKind::V2, 0).unwrap();
        assert!(vgg.sbc_modules().all(|m| m.bypass.width == m.c_out().div_ceil(2)));
        assert!(net.masked_flops().unwrap() > arch.total_flops().unwrap());
    }

    #[test]
    fn sbcnet_strips_back_to_baseline_graph() {
        let arch = arch_spec(ArchName::Resnet20);
        let net = build_sbcnet::<f32>(&arch, 0.4, BypassKind::V2, 0).unwrap();
        assert_eq!(net.sparse_layer_specs(), arch.layers);
        let vgg = arch_spec(ArchName::Vgg16Cifar);
        let net = build_sbcnet::<f32>(&vgg, 0.4, BypassKind::V1, 0).unwrap();
        assert_eq!(net.sparse_layer_specs(), vgg.layers);
    }

    #[test]
    fn loose_target_without_bypasses_keeps_everything() {
        let arch = arch_spec(ArchName::Resnet20);
        let n = arch.prunable_indices().len();
        let plan = uniform_prune_plan(&arch.layers, &vec![None; n], 1.0).unwrap();
        assert_eq!(plan.rate, 0.0);
        assert_eq!(plan.c_hat, 1.0);
    }

    #[test]
    fn infeasible_target_is_reported() {
        let arch = arch_spec(ArchName::Resnet20);
        let n = arch.prunable_indices().len();
        let by = vec![Some(BypassSpec { kind: BypassKind::V2, width: 64 }); n];
        let err = uniform_prune_plan(&arch.layers, &by, 0.01).unwrap_err();
        assert!(matches!(err, LappError::Infeasible(_)));
    }
}
