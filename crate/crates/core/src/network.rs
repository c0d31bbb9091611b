//! Network containers shared by baselines, SBC networks and compact networks.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::flops::{self, BypassSpec, LayerSpec};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join, relu, relu_backward, Linear, MaxPool2, Param, Visit,
};
use crate::sbc::{ConvBn, SbcModule};
use crate::surgery::CompactModule;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    Resnet20,
    Resnet32,
    Resnet56,
    Vgg16Cifar,
    /// Eight-layer ResNet with widths 8/16/32, for smoke runs and tests.
    ResnetTiny,
}

impl std::str::FromStr for ArchName {
    type Err = crate::LappError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "resnet20" => Ok(ArchName::Resnet20),
            "resnet32" => Ok(ArchName::Resnet32),
            "resnet56" => Ok(ArchName::Resnet56),
            "vgg16" | "vgg16_cifar" => Ok(ArchName::Vgg16Cifar),
            "resnet_tiny" | "resnettiny" => Ok(ArchName::ResnetTiny),
            _ => Err(crate::LappError::Usage(format!(
                "unknown architecture {s:?} (expected resnet20, resnet32, resnet56, vgg16_cifar or resnet_tiny)"
            ))),
        }
    }
}

impl std::fmt::Display for ArchName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArchName::Resnet20 => "resnet20",
            ArchName::Resnet32 => "resnet32",
            ArchName::Resnet56 => "resnet56",
            ArchName::Vgg16Cifar => "vgg16_cifar",
            ArchName::ResnetTiny => "resnet_tiny",
        })
    }
}

/// Indices into [`ArchSpec::layers`] for one residual basic block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub conv1: usize,
    pub conv2: usize,
    pub shortcut: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    /// Stem conv at index 0, then basic blocks.
    ResNet { blocks: Vec<BasicBlock> },
    /// Conv-norm-relu chain, 2×2 max pooling after the flagged layers.
    Vgg { pool_after: Vec<bool> },
}

/// Static layer graph of a network. The classifier is the last layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: ArchName,
    pub layers: Vec<LayerSpec>,
    pub topology: Topology,
    pub class_count: usize,
}

impl ArchSpec {
    pub fn conv_layers(&self) -> &[LayerSpec] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn classifier(&self) -> &LayerSpec {
        self.layers.last().expect("classifier layer")
    }

    pub fn prunable_indices(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.prunable).map(|(i, _)| i).collect()
    }

    pub fn prunable_set(&self) -> Vec<&str> {
        self.layers.iter().filter(|l| l.prunable).map(|l| l.name.as_str()).collect()
    }

    pub fn total_flops(&self) -> Result<u64> {
        flops::network_total_flops(&self.layers)
    }

    /// Every consumer's input width equals its producer's output width.
    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            l.validate()?;
        }
        let convs = self.conv_layers();
        let mismatch = |a: &LayerSpec, b: &LayerSpec| {
            shape(format!("{} produces {} channels but {} consumes {}", a.name, a.c_out, b.name, b.c_in))
        };
        let last_width = match &self.topology {
            Topology::ResNet { blocks } => {
                let mut width = convs[0].c_out;
                for b in blocks {
                    let (c1, c2) = (&convs[b.conv1], &convs[b.conv2]);
                    if c1.c_in != width {
                        return Err(shape(format!("{} expects {} channels, stream has {width}", c1.name, c1.c_in)));
                    }
                    if c2.c_in != c1.c_out {
                        return Err(mismatch(c1, c2));
                    }
                    match b.shortcut {
                        Some(s) if convs[s].c_in != width || convs[s].c_out != c2.c_out => {
                            return Err(shape(format!("shortcut {} does not bridge the block", convs[s].name)));
                        }
                        None if width != c2.c_out => {
                            return Err(shape(format!("identity shortcut around {} changes width", c2.name)));
                        }
                        _ => {}
                    }
                    width = c2.c_out;
                }
                width
            }
            Topology::Vgg { .. } => {
                for pair in convs.windows(2) {
                    if pair[1].c_in != pair[0].c_out {
                        return Err(mismatch(&pair[0], &pair[1]));
                    }
                }
                convs.last().expect("conv layers").c_out
            }
        };
        if self.classifier().c_in != last_width {
            return Err(shape("classifier input does not match final feature width"));
        }
        Ok(())
    }
}

/// One convolution position in the network.
#[derive(Clone, Debug)]
pub enum ConvUnit<T> {
    Plain(ConvBn<T>),
    Sbc(SbcModule<T>),
    Compact(CompactModule<T>),
}

impl<T: Scalar> ConvUnit<T> {
    /// Output before the activation that follows this unit.
    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array4<T>> {
        match self {
            ConvUnit::Plain(u) => u.forward(x, train),
            ConvUnit::Sbc(m) => m.forward(x, train),
            ConvUnit::Compact(m) => m.forward(x, train),
        }
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        match self {
            ConvUnit::Plain(u) => u.backward(dy),
            ConvUnit::Sbc(m) => m.backward(dy),
            ConvUnit::Compact(m) => m.backward(dy),
        }
    }

    /// Per-sample MACs computed from tensor shapes.
    pub fn macs(&self, h_out: usize, w_out: usize) -> u64 {
        match self {
            ConvUnit::Plain(u) => u.conv.macs(h_out, w_out),
            ConvUnit::Sbc(m) => m.macs(h_out, w_out),
            ConvUnit::Compact(m) => m.macs(h_out, w_out),
        }
    }

    pub fn params(&self) -> u64 {
        match self {
            ConvUnit::Plain(u) => u.params(),
            ConvUnit::Sbc(m) => m.params(),
            ConvUnit::Compact(m) => m.params(),
        }
    }

    pub fn kept_count(&self) -> usize {
        match self {
            ConvUnit::Plain(u) => u.out_channels(),
            ConvUnit::Sbc(m) => m.mask.kept_count,
            ConvUnit::Compact(m) => m.kept.len(),
        }
    }

    pub fn bypass_spec(&self) -> Option<BypassSpec> {
        match self {
            ConvUnit::Plain(_) => None,
            ConvUnit::Sbc(m) => Some(m.bypass_spec()),
            ConvUnit::Compact(m) => Some(m.bypass.spec()),
        }
    }

    pub fn as_sbc(&self) -> Option<&SbcModule<T>> {
        match self {
            ConvUnit::Sbc(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_sbc_mut(&mut self) -> Option<&mut SbcModule<T>> {
        match self {
            ConvUnit::Sbc(m) => Some(m),
            _ => None,
        }
    }
}

impl<T: Scalar> Visit<T> for ConvUnit<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            ConvUnit::Plain(u) => u.visit(prefix, f),
            ConvUnit::Sbc(m) => m.visit(prefix, f),
            ConvUnit::Compact(m) => m.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            ConvUnit::Plain(u) => u.visit_mut(prefix, f),
            ConvUnit::Sbc(m) => m.visit_mut(prefix, f),
            ConvUnit::Compact(m) => m.visit_mut(prefix, f),
        }
    }
}

/// A live network: one [`ConvUnit`] per conv layer of the arch, plus the classifier.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub arch: ArchSpec,
    pub units: Vec<ConvUnit<T>>,
    pub classifier: Linear<T>,
    pools: Vec<MaxPool2>,
    acts: Vec<Array4<T>>,
    feature_extent: (usize, usize),
}

impl<T: Scalar> Network<T> {
    pub fn new(arch: ArchSpec, units: Vec<ConvUnit<T>>, classifier: Linear<T>) -> Self {
        let pools = vec![MaxPool2::default(); units.len()];
        Network { arch, units, classifier, pools, acts: Vec::new(), feature_extent: (0, 0) }
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array2<T>> {
        self.acts.clear();
        let keep = |acts: &mut Vec<Array4<T>>, a: &Array4<T>| {
            if train {
                acts.push(a.clone());
            }
        };
        let features = match &self.arch.topology {
            Topology::ResNet { blocks } => {
                let mut a = relu(self.units[0].forward(x, train)?);
                keep(&mut self.acts, &a);
                for b in blocks {
                    let h = relu(self.units[b.conv1].forward(&a, train)?);
                    keep(&mut self.acts, &h);
                    let o = self.units[b.conv2].forward(&h, train)?;
                    let skip = match b.shortcut {
                        Some(s) => self.units[s].forward(&a, train)?,
                        None => a,
                    };
                    a = relu(o + skip);
                    keep(&mut self.acts, &a);
                }
                a
            }
            Topology::Vgg { pool_after } => {
                let mut a = x.clone();
                for (i, &pool) in pool_after.iter().enumerate() {
                    a = relu(self.units[i].forward(&a, train)?);
                    keep(&mut self.acts, &a);
                    if pool {
                        a = self.pools[i].forward(&a, train);
                    }
                }
                a
            }
        };
        let (_, _, h, w) = features.dim();
        self.feature_extent = (h, w);
        self.classifier.forward(&global_avg_pool(&features), train)
    }

    /// Accumulates gradients of every parameter given `∂loss/∂logits`.
    pub fn backward(&mut self, dlogits: &Array2<T>) {
        let dfeat = self.classifier.backward(dlogits);
        let (h, w) = self.feature_extent;
        let mut da = global_avg_pool_backward(&dfeat, h, w);
        let mut acts = std::mem::take(&mut self.acts);
        match &self.arch.topology {
            Topology::ResNet { blocks } => {
                for b in blocks.iter().rev() {
                    let out = acts.pop().expect("cached block output");
                    let dsum = relu_backward(&da, &out);
                    let h = acts.pop().expect("cached block hidden");
                    let dh = relu_backward(&self.units[b.conv2].backward(&dsum), &h);
                    let dx = self.units[b.conv1].backward(&dh);
                    let dskip = match b.shortcut {
                        Some(s) => self.units[s].backward(&dsum),
                        None => dsum,
                    };
                    da = dx + dskip;
                }
                let stem = acts.pop().expect("cached stem output");
                self.units[0].backward(&relu_backward(&da, &stem));
            }
            Topology::Vgg { pool_after } => {
                for (i, &pool) in pool_after.iter().enumerate().rev() {
                    if pool {
                        da = self.pools[i].backward(&da);
                    }
                    let a = acts.pop().expect("cached activation");
                    da = self.units[i].backward(&relu_backward(&da, &a));
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    pub fn refresh_masks(&mut self) -> Result<()> {
        for m in self.sbc_modules_mut() {
            m.refresh_mask()?;
        }
        Ok(())
    }

    pub fn sbc_modules(&self) -> impl Iterator<Item = &SbcModule<T>> {
        self.units.iter().filter_map(ConvUnit::as_sbc)
    }

    pub fn sbc_modules_mut(&mut self) -> impl Iterator<Item = &mut SbcModule<T>> {
        self.units.iter_mut().filter_map(ConvUnit::as_sbc_mut)
    }

    /// `(layer index, unit)` for every prunable layer.
    pub fn prunable_units(&self) -> impl Iterator<Item = (usize, &ConvUnit<T>)> {
        self.units.iter().enumerate().filter(|(i, _)| self.arch.layers[*i].prunable)
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.prunable_units().map(|(_, u)| u.kept_count()).collect()
    }

    pub fn bypass_specs(&self) -> Vec<Option<BypassSpec>> {
        self.prunable_units().map(|(_, u)| u.bypass_spec()).collect()
    }

    pub fn baseline_flops(&self) -> Result<u64> {
        self.arch.total_flops()
    }

    /// FLOPs through the layer-spec model with the current kept counts.
    pub fn masked_flops(&self) -> Result<u64> {
        flops::masked_network_flops(&self.arch.layers, &self.kept_counts(), &self.bypass_specs())
    }

    /// FLOPs read off the live tensor shapes.
    pub fn structural_flops(&self) -> u64 {
        let convs: u64 = self
            .units
            .iter()
            .zip(&self.arch.layers)
            .map(|(u, l)| u.macs(l.h_out, l.w_out))
            .sum();
        convs + self.classifier.macs()
    }

    pub fn structural_params(&self) -> u64 {
        let convs: u64 = self.units.iter().map(ConvUnit::params).sum();
        convs + (self.classifier.weight.len() + self.classifier.bias.len()) as u64
    }

    pub fn masked_params(&self) -> Result<u64> {
        flops::params_count(&self.arch.layers, &self.kept_counts(), &self.bypass_specs())
    }

    /// Layer specs reconstructed from each unit's main convolution, ignoring
    /// bypasses and masks.
    pub fn sparse_layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs: Vec<LayerSpec> = self
            .units
            .iter()
            .zip(&self.arch.layers)
            .map(|(u, l)| {
                let conv = match u {
                    ConvUnit::Plain(p) => &p.conv,
                    ConvUnit::Sbc(m) => &m.sparse.conv,
                    ConvUnit::Compact(m) => return m.original_spec(l),
                };
                let mut s = LayerSpec::conv(l.name.clone(), conv.in_channels, conv.out_channels, conv.kernel, conv.stride, l.h_out);
                s.w_out = l.w_out;
                s.kind = l.kind;
                s.prunable = l.prunable;
                s.normalized = l.normalized;
                s
            })
            .collect();
        let mut fc = LayerSpec::linear(self.arch.classifier().name.clone(), self.classifier.inputs(), self.classifier.outputs());
        fc.prunable = false;
        specs.push(fc);
        specs
    }

    /// Per prunable module: `(name, c_out, kept, rate, bypass width)`.
    pub fn layer_rates(&self) -> Vec<(String, usize, usize, f64, Option<usize>)> {
        self.prunable_units()
            .map(|(i, u)| {
                let l = &self.arch.layers[i];
                let n = u.kept_count();
                (l.name.clone(), l.c_out, n, 1.0 - n as f64 / l.c_out as f64, u.bypass_spec().map(|b| b.width))
            })
            .collect()
    }

    pub fn is_compact(&self) -> bool {
        self.prunable_units().all(|(_, u)| matches!(u, ConvUnit::Compact(_)))
    }

    pub fn has_sbc(&self) -> bool {
        self.units.iter().any(|u| matches!(u, ConvUnit::Sbc(_)))
    }
}

impl<T: Scalar> Visit<T> for Network<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (u, l) in self.units.iter().zip(&self.arch.layers) {
            u.visit(&join(prefix, &l.name), f);
        }
        self.classifier.visit(&join(prefix, &self.arch.classifier().name), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        let names: Vec<String> = self.arch.layers.iter().map(|l| l.name.clone()).collect();
        for (u, name) in self.units.iter_mut().zip(&names) {
            u.visit_mut(&join(prefix, name), f);
        }
        self.classifier.visit_mut(&join(prefix, names.last().expect("classifier")), f);
    }
}
