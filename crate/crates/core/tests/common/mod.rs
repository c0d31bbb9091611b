//! Oracles shared by several test targets.
#![allow(dead_code)]

use lapp::builder::{arch_spec, build_sbcnet};
use lapp::flops::{BypassKind, BypassSpec, LayerKind, LayerSpec};
use lapp::masking::importance_l1;
use lapp::network::{ArchName, Network};
use lapp::nn::{Param, ParamKind, Visit};
use lapp::sbc::SbcModule;
use lapp::Scalar;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Toy {
    pub layers: Vec<LayerSpec>,
    pub masks: Vec<Vec<bool>>,
    pub bypass: Vec<Option<BypassSpec>>,
}

pub fn random_toy(rng: &mut ChaCha8Rng) -> Toy {
    let depth = rng.random_range(1..=4);
    let mut extent = rng.random_range(1..=8usize);
    let mut c_in = rng.random_range(1..=8);
    let mut layers = Vec::new();
    let mut masks = Vec::new();
    let mut bypass = Vec::new();
    for i in 0..depth {
        if i == depth - 1 && rng.random_bool(0.3) {
            layers.push(LayerSpec::linear(format!("fc{i}"), c_in, rng.random_range(1..=8)));
            break;
        }
        let stride = if extent >= 2 && rng.random_bool(0.4) { 2 } else { 1 };
        extent = extent.div_ceil(stride);
        let k = [1, 3][rng.random_range(0..2)];
        if k == 3 && rng.random_bool(0.2) {
            let mut l = LayerSpec::conv(format!("dw{i}"), c_in, c_in, k, stride, extent);
            l.kind = LayerKind::DepthwiseConv;
            layers.push(l);
            continue;
        }
        let c_out = rng.random_range(1..=8);
        let mut l = LayerSpec::conv(format!("conv{i}"), c_in, c_out, k, stride, extent);
        if rng.random_bool(0.7) {
            l = l.prunable();
            masks.push((0..c_out).map(|_| rng.random_bool(0.5)).collect());
            bypass.push(match rng.random_range(0..3) {
                0 => None,
                1 => Some(BypassSpec { kind: BypassKind::V1, width: c_in }),
                _ => Some(BypassSpec { kind: BypassKind::V2, width: rng.random_range(1..=c_out) }),
            });
        }
        layers.push(l);
        c_in = c_out;
    }
    Toy { layers, masks, bypass }
}

/// Multiplies performed by a dense conv producing `out_channels` (listed)
/// over an `h × w` output grid, each reading `reads` input channels with a
/// `k × k` window.
fn count_conv(out_channels: impl Iterator<Item = usize>, h: usize, w: usize, reads: usize, k: usize) -> u64 {
    let mut n = 0u64;
    for _o in out_channels {
        for _y in 0..h {
            for _x in 0..w {
                for _c in 0..reads {
                    for _ky in 0..k {
                        for _kx in 0..k {
                            n += 1;
                        }
                    }
                }
            }
        }
    }
    n
}

fn count_bypass(l: &LayerSpec, by: &BypassSpec) -> u64 {
    let (hi, wi) = (l.h_out * l.stride, l.w_out * l.stride);
    match by.kind {
        BypassKind::V2 => {
            count_conv(0..by.width, hi, wi, l.c_in, 1)
                + count_conv(0..by.width, l.h_out, l.w_out, 1, l.k)
                + count_conv(0..l.c_out, l.h_out, l.w_out, by.width, 1)
        }
        BypassKind::V1 => {
            count_conv(0..l.c_in, l.h_out, l.w_out, 1, l.k) + count_conv(0..l.c_out, l.h_out, l.w_out, l.c_in, 1)
        }
    }
}

pub fn brute_force(toy: &Toy) -> u64 {
    let mut j = 0;
    let mut total = 0;
    for l in &toy.layers {
        match l.kind {
            LayerKind::Linear => total += count_conv(0..l.c_out, 1, 1, l.c_in, 1),
            LayerKind::DepthwiseConv => total += count_conv(0..l.c_out, l.h_out, l.w_out, 1, l.k),
            _ if l.prunable => {
                let kept = toy.masks[j].iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i);
                total += count_conv(kept, l.h_out, l.w_out, l.c_in, l.k);
                if let Some(by) = &toy.bypass[j] {
                    total += count_bypass(l, by);
                }
                j += 1;
            }
            _ => total += count_conv(0..l.c_out, l.h_out, l.w_out, l.c_in, l.k),
        }
    }
    total
}

pub fn kept(toy: &Toy) -> Vec<usize> {
    toy.masks.iter().map(|m| m.iter().filter(|&&b| b).count()).collect()
}

/// Normalization statistics and affine terms away from their defaults, so
/// inference-mode normalization actually shifts channels.
pub fn perturb_norms<T: Scalar>(net: &mut Network<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.visit_mut("", &mut |name: &str, p: &mut Param<T>| {
        let range = match p.kind {
            ParamKind::NormScale => 0.5..1.5,
            ParamKind::NormShift => -0.3..0.3,
            ParamKind::Buffer if name.ends_with("running_var") => 0.5..2.0,
            ParamKind::Buffer => -0.2..0.2,
            _ => return,
        };
        p.value.mapv_inplace(|_| T::lit(rng.random_range(range.clone())));
    });
}

/// Thresholds at a random quantile of each module's importances.
pub fn mixed_thresholds<T: Scalar>(net: &mut Network<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in net.sbc_modules_mut() {
        let mut imp: Vec<T> = importance_l1(m.sparse_weights()).unwrap().to_vec();
        imp.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = rng.random_range(1..imp.len());
        m.set_threshold(imp[q]);
    }
    net.refresh_masks().unwrap();
}

pub fn masked_net<T: Scalar>(arch: ArchName, c: f64, kind: BypassKind, seed: u64) -> Network<T> {
    let mut net = build_sbcnet::<T>(&arch_spec(arch), c, kind, seed).unwrap();
    perturb_norms(&mut net, seed + 1);
    mixed_thresholds(&mut net, seed + 2);
    net
}

pub fn assert_mixed<T: Scalar>(net: &Network<T>) {
    let kept = net.kept_counts();
    let full: Vec<usize> = net.sbc_modules().map(|m| m.c_out()).collect();
    assert!(kept.iter().zip(&full).all(|(k, c)| *k > 0 && k < c), "{kept:?}");
}


/// Toy f64 module with a threshold splitting its filters.
pub fn module(kind: BypassKind, stride: usize, seed: u64) -> SbcModule<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = if kind == BypassKind::V2 { 3 } else { 5 };
    let mut m = SbcModule::<f64>::new(3, 5, 3, stride, kind, d, &mut rng).unwrap();
    // Threshold between the second and third smallest importance: mixed mask.
    let mut imp = importance_l1(m.sparse_weights()).unwrap().to_vec();
    imp.sort_by(|a, b| a.partial_cmp(b).unwrap());
    m.set_threshold(0.5 * (imp[1] + imp[2]) + 0.01);
    m.refresh_mask().unwrap();
    m
}

pub fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

/// Forward in training mode, backward a fixed upstream; returns `Σ r ⊙ y`.
pub fn probe(m: &mut SbcModule<f64>, x: &Array4<f64>, r: &Array4<f64>) -> f64 {
    let y = m.forward(x, true).unwrap();
    (&y * r).sum()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn collect<V: Visit<f64>>(v: &V) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    v.visit("", &mut |name: &str, p: &Param<f64>| {
        if p.kind.trainable() {
            out.push((name.to_string(), p.value.shape().to_vec(), p.len()));
        }
    });
    out
}

pub fn nudge<V: Visit<f64>>(v: &mut V, target: &str, index: usize, delta: f64) {
    v.visit_mut("", &mut |name: &str, p: &mut Param<f64>| {
        if name == target {
            let slot = p.value.iter_mut().nth(index).unwrap();
            *slot += delta;
        }
    });
}

pub fn grad_of<V: Visit<f64>>(v: &V, target: &str, index: usize) -> f64 {
    let mut g = f64::NAN;
    v.visit("", &mut |name: &str, p: &Param<f64>| {
        if name == target {
            g = *p.grad.iter().nth(index).unwrap();
        }
    });
    g
}

