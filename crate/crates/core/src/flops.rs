//! Multiply-accumulate accounting for baseline networks, SBC networks and
//! their masked variants, plus the FLOPs-constraint regularizer.
//!
//! One FLOP is one multiply-accumulate. Normalization, activation, pooling
//! and elementwise additions are not counted.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    PointwiseConv,
    Linear,
}

/// Static description of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub prunable: bool,
    /// Whether a per-channel normalization layer follows (counts toward parameters only).
    #[serde(default = "default_true")]
    pub normalized: bool,
}

fn default_true() -> bool {
    true
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize, h_out: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: if k == 1 { LayerKind::PointwiseConv } else { LayerKind::Conv },
            c_in,
            c_out,
            k,
            stride,
            h_out,
            w_out: h_out,
            prunable: false,
            normalized: true,
        }
    }

    pub fn linear(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Linear,
            c_in: inputs,
            c_out: outputs,
            k: 1,
            stride: 1,
            h_out: 1,
            w_out: 1,
            prunable: false,
            normalized: false,
        }
    }

    pub fn prunable(mut self) -> Self {
        self.prunable = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.c_in, self.c_out, self.k, self.stride, self.h_out, self.w_out];
        if dims.contains(&0) {
            return Err(domain(format!("layer {}: all extents must be at least 1", self.name)));
        }
        if self.kind == LayerKind::DepthwiseConv && self.c_in != self.c_out {
            return Err(domain(format!(
                "layer {}: depthwise conv needs c_in == c_out ({} != {})",
                self.name, self.c_in, self.c_out
            )));
        }
        Ok(())
    }

    /// Spatial extent of the layer input under "same" padding.
    pub fn input_extent(&self) -> (usize, usize) {
        (self.h_out * self.stride, self.w_out * self.stride)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BypassKind {
    /// 1×1 → depthwise k×k → 1×1.
    V2,
    /// depthwise k×k → 1×1.
    V1,
}

impl std::str::FromStr for BypassKind {
    type Err = crate::LappError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v2" | "V2" => Ok(BypassKind::V2),
            "v1" | "V1" => Ok(BypassKind::V1),
            other => Err(crate::LappError::Usage(format!("unknown bypass kind {other:?} (expected v2 or v1)"))),
        }
    }
}

impl std::fmt::Display for BypassKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BypassKind::V2 => "v2",
            BypassKind::V1 => "v1",
        })
    }
}

/// Bypass attached to one prunable layer. `width` is the hidden width `d`
/// for V2 and the input channel count for V1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BypassSpec {
    pub kind: BypassKind,
    pub width: usize,
}

impl BypassSpec {
    pub fn flops(&self, layer: &LayerSpec) -> Result<u64> {
        match self.kind {
            BypassKind::V2 => bypass_flops(
                layer.c_in,
                layer.c_out,
                self.width,
                layer.k,
                layer.h_out,
                layer.w_out,
                layer.stride,
            ),
            BypassKind::V1 => bypass_v1_flops(layer.c_in, layer.c_out, layer.k, layer.h_out, layer.w_out),
        }
    }

    pub fn params(&self, layer: &LayerSpec) -> u64 {
        let (ci, co, k) = (layer.c_in as u64, layer.c_out as u64, layer.k as u64);
        match self.kind {
            BypassKind::V2 => {
                let d = self.width as u64;
                ci * d + 2 * d + d * k * k + 2 * d + d * co + 2 * co
            }
            BypassKind::V1 => ci * k * k + 2 * ci + ci * co + 2 * co,
        }
    }
}

fn check_range(what: &str, active: usize, max: usize) -> Result<()> {
    if active > max {
        return Err(domain(format!("{what} count {active} exceeds layer width {max}")));
    }
    Ok(())
}

/// Multiply-accumulates of one layer with `active_out` filters reading
/// `active_in` input channels.
pub fn conv_flops(layer: &LayerSpec, active_out: usize, active_in: usize) -> Result<u64> {
    layer.validate()?;
    check_range("active output", active_out, layer.c_out)?;
    check_range("active input", active_in, layer.c_in)?;
    let plane = (layer.h_out * layer.w_out) as u64;
    let taps = (layer.k * layer.k) as u64;
    Ok(match layer.kind {
        LayerKind::DepthwiseConv => plane * active_out as u64 * taps,
        _ => plane * active_in as u64 * active_out as u64 * taps,
    })
}

/// Multiply-accumulates of a V2 bypass: 1×1 at input resolution, depthwise
/// k×k carrying the stride, 1×1 at output resolution.
pub fn bypass_flops(
    c_in: usize,
    c_out: usize,
    d: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
) -> Result<u64> {
    if [c_in, c_out, d, k, h_out, w_out, stride].contains(&0) {
        return Err(domain("bypass extents must be at least 1"));
    }
    let (ci, co, d, k) = (c_in as u64, c_out as u64, d as u64, k as u64);
    let out_plane = (h_out * w_out) as u64;
    let in_plane = (h_out * stride * w_out * stride) as u64;
    Ok(in_plane * ci * d + out_plane * (d * k * k + d * co))
}

/// Multiply-accumulates of a V1 bypass: depthwise k×k over the input
/// channels (strided) followed by a 1×1 at output resolution.
pub fn bypass_v1_flops(c_in: usize, c_out: usize, k: usize, h_out: usize, w_out: usize) -> Result<u64> {
    if [c_in, c_out, k, h_out, w_out].contains(&0) {
        return Err(domain("bypass extents must be at least 1"));
    }
    let (ci, co, k) = (c_in as u64, c_out as u64, k as u64);
    Ok((h_out * w_out) as u64 * (ci * k * k + ci * co))
}

pub fn network_total_flops(arch: &[LayerSpec]) -> Result<u64> {
    if arch.is_empty() {
        return Err(domain("architecture has no layers"));
    }
    arch.iter().map(|l| conv_flops(l, l.c_out, l.c_in)).sum()
}

/// ∂T_kept/∂n for a prunable layer: the cost of one extra sparse-path filter.
pub fn filter_flops(layer: &LayerSpec) -> Result<u64> {
    conv_flops(layer, 1, layer.c_in)
}

fn check_module_lists(arch: &[LayerSpec], kept: &[usize], bypass: &[Option<BypassSpec>]) -> Result<usize> {
    let prunable = arch.iter().filter(|l| l.prunable).count();
    if kept.len() != prunable || bypass.len() != prunable {
        return Err(domain(format!(
            "{prunable} prunable layers but {} kept counts and {} bypass entries",
            kept.len(),
            bypass.len()
        )));
    }
    Ok(prunable)
}

/// FLOPs of a masked SBC network. `kept[j]` and `bypass[j]` describe the
/// j-th prunable layer of `arch` in order. Sparse paths read the full input
/// width; non-prunable layers are counted in full.
pub fn masked_network_flops(arch: &[LayerSpec], kept: &[usize], bypass: &[Option<BypassSpec>]) -> Result<u64> {
    check_module_lists(arch, kept, bypass)?;
    let mut modules = kept.iter().zip(bypass);
    let mut total = 0u64;
    for layer in arch {
        if layer.prunable {
            let (&n, by) = modules.next().expect("counted above");
            total += conv_flops(layer, n, layer.c_in)?;
            if let Some(by) = by {
                total += by.flops(layer)?;
            }
        } else {
            total += conv_flops(layer, layer.c_out, layer.c_in)?;
        }
    }
    Ok(total)
}

pub fn compression_rate(t_kept: u64, t_total: u64) -> Result<f64> {
    if t_total == 0 {
        return Err(domain("total FLOPs must be positive"));
    }
    Ok(t_kept as f64 / t_total as f64)
}

fn check_target(c_target: f64) -> Result<()> {
    if !(c_target > 0.0 && c_target < 1.0) {
        return Err(domain(format!("target compression rate {c_target} outside (0, 1)")));
    }
    Ok(())
}

/// `(Ĉ/C − 1)²`, evaluated as `((Ĉ − C)/C)²` so the difference is exact
/// whenever `C/2 ≤ Ĉ ≤ 2C`.
pub fn flops_regularizer(c_hat: f64, c_target: f64) -> Result<f64> {
    check_target(c_target)?;
    let r = (c_hat - c_target) / c_target;
    Ok(r * r)
}

/// Derivative of [`flops_regularizer`] with respect to `c_hat`.
pub fn flops_regularizer_grad(c_hat: f64, c_target: f64) -> Result<f64> {
    check_target(c_target)?;
    Ok(2.0 * ((c_hat - c_target) / c_target) / c_target)
}

/// Baseline cost, current masked cost and the ratio between them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsAccount {
    pub t_total: u64,
    pub t_kept: u64,
    pub c_hat: f64,
    pub c_target: f64,
}

impl FlopsAccount {
    pub fn new(t_total: u64, t_kept: u64, c_target: f64) -> Result<Self> {
        Ok(FlopsAccount { t_total, t_kept, c_hat: compression_rate(t_kept, t_total)?, c_target })
    }

    pub fn update(&mut self, t_kept: u64) {
        self.t_kept = t_kept;
        self.c_hat = t_kept as f64 / self.t_total as f64;
    }
}

fn layer_params(layer: &LayerSpec, active_out: usize) -> u64 {
    let (ci, k, n) = (layer.c_in as u64, layer.k as u64, active_out as u64);
    let weights = match layer.kind {
        LayerKind::DepthwiseConv => n * k * k,
        LayerKind::Linear => n * ci + n,
        _ => n * ci * k * k,
    };
    let norm = if layer.normalized { 2 * n } else { 0 };
    weights + norm
}

/// Weights plus normalization scale/shift pairs (and classifier bias).
pub fn params_count(arch: &[LayerSpec], kept: &[usize], bypass: &[Option<BypassSpec>]) -> Result<u64> {
    check_module_lists(arch, kept, bypass)?;
    let mut modules = kept.iter().zip(bypass);
    let mut total = 0u64;
    for layer in arch {
        layer.validate()?;
        if layer.prunable {
            let (&n, by) = modules.next().expect("counted above");
            check_range("kept", n, layer.c_out)?;
            total += layer_params(layer, n);
            if let Some(by) = by {
                total += by.params(layer);
            }
        } else {
            total += layer_params(layer, layer.c_out);
        }
    }
    Ok(total)
}

/// Reads the CSV architecture document (header row with the `LayerSpec` field names).
pub fn read_arch_document<R: Read>(reader: R) -> Result<Vec<LayerSpec>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let layers = rdr.deserialize().collect::<std::result::Result<Vec<LayerSpec>, _>>()?;
    for l in &layers {
        l.validate()?;
    }
    Ok(layers)
}

pub fn write_arch_document<W: Write>(writer: W, layers: &[LayerSpec]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for l in layers {
        wtr.serialize(l)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(c_in: usize, c_out: usize, k: usize, h: usize) -> LayerSpec {
        LayerSpec::conv("c", c_in, c_out, k, 1, h)
    }

    #[test]
    fn conv_flops_examples() {
        assert_eq!(conv_flops(&conv(3, 16, 3, 32), 16, 3).unwrap(), 442_368);
        assert_eq!(conv_flops(&conv(3, 16, 3, 32), 0, 3).unwrap(), 0);
        let mut dw = conv(16, 16, 3, 16);
        dw.kind = LayerKind::DepthwiseConv;
        assert_eq!(conv_flops(&dw, 16, 16).unwrap(), 36_864);
        assert!(conv_flops(&conv(3, 16, 3, 32), 17, 3).is_err());
        assert!(conv_flops(&conv(3, 16, 3, 32), 16, 4).is_err());
    }

    #[test]
    fn bypass_flops_examples() {
        assert_eq!(bypass_flops(16, 16, 16, 3, 32, 32, 1).unwrap(), 671_744);
        assert_eq!(bypass_flops(1, 1, 1, 1, 1, 1, 1).unwrap(), 3);
        assert!(bypass_flops(0, 1, 1, 1, 1, 1, 1).is_err());
        // stride 1, c_in = c_out = c: hw(2cd + dk²)
        for (c, d, k, h) in [(8, 4, 3, 5), (64, 32, 3, 8), (7, 7, 5, 3)] {
            let closed = (h * h * (2 * c * d + d * k * k)) as u64;
            assert_eq!(bypass_flops(c, c, d, k, h, h, 1).unwrap(), closed);
        }
    }

    #[test]
    fn depthwise_layer_must_be_square() {
        let mut l = conv(4, 8, 3, 4);
        l.kind = LayerKind::DepthwiseConv;
        assert!(l.validate().is_err());
    }

    #[test]
    fn compression_rate_examples() {
        assert_eq!(compression_rate(10, 10).unwrap(), 1.0);
        assert_eq!(compression_rate(0, 10).unwrap(), 0.0);
        assert_eq!(compression_rate(3, 4).unwrap(), 0.75);
        assert!(compression_rate(1, 0).is_err());
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(flops_regularizer(0.4, 0.4).unwrap(), 0.0);
        assert_eq!(flops_regularizer(0.8, 0.4).unwrap(), 1.0);
        // 0.6 and 0.4 are not representable; the exact value at the nearest
        // doubles is 0.24999999999999986.
        assert!((flops_regularizer(0.6, 0.4).unwrap() - 0.25).abs() <= 4.0 * f64::EPSILON);
        assert_eq!(flops_regularizer(0.75, 0.5).unwrap(), 0.25);
        assert!(flops_regularizer(0.6, 0.0).is_err());
        assert!(flops_regularizer(0.6, 1.0).is_err());
    }

    #[test]
    fn network_totals_are_additive() {
        let a = conv(3, 16, 3, 32);
        let single = network_total_flops(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single, conv_flops(&a, 16, 3).unwrap());
        assert_eq!(network_total_flops(&[a.clone(), a]).unwrap(), 2 * single);
        assert!(network_total_flops(&[]).is_err());
    }

    #[test]
    fn params_examples() {
        let mut l = conv(3, 16, 3, 32).prunable();
        l.normalized = false;
        assert_eq!(params_count(&[l.clone()], &[16], &[None]).unwrap(), 432);
        let by = BypassSpec { kind: BypassKind::V2, width: 4 };
        assert_eq!(params_count(&[l.clone()], &[0], &[Some(by)]).unwrap(), by.params(&l));
    }

    #[test]
    fn arch_document_round_trip() {
        let layers = vec![
            conv(3, 16, 3, 32),
            conv(16, 16, 3, 32).prunable(),
            LayerSpec::linear("fc", 16, 10),
        ];
        let mut buf = Vec::new();
        write_arch_document(&mut buf, &layers).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("name,kind,c_in,c_out,k,stride,h_out,w_out,prunable"));
        assert_eq!(read_arch_document(buf.as_slice()).unwrap(), layers);
    }
}
