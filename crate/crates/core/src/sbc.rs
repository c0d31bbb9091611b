//! Sparse module with bypass compensation.
//!
//! Output (before the network's activation) is the masked, normalized sparse
//! convolution plus a lightweight bypass:
//!
//! ```text
//! y = M ⊙ BN(W_S ⊛ x)  +  BN(W_B3 ⊛ relu(BN(W_B2 ⊛ relu(BN(W_B1 ⊛ x)))))
//! ```
//!
//! The V1 bypass drops the leading 1×1 and runs the depthwise conv on the
//! input channels directly.

use ndarray::{Array1, Array4, Axis, Ix4, Zip};
use rand::Rng;

use crate::error::{domain, shape, Result};
use crate::flops::{BypassKind, BypassSpec};
use crate::masking::{apply_mask, threshold_grad, MaskBundle};
use crate::nn::{join, relu, relu_backward, BatchNorm2d, Conv2d, Param, ParamKind, Visit};
use crate::Scalar;

/// Targets below this use a half-width bypass.
pub const SMALL_TARGET_BOUNDARY: f64 = 0.25;

/// Convolution followed by batch normalization.
#[derive(Clone, Debug)]
pub struct ConvBn<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        ConvBn { conv: Conv2d::new(c_in, c_out, k, stride, rng), bn: BatchNorm2d::new(c_out) }
    }

    pub fn depthwise<R: Rng + ?Sized>(channels: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        ConvBn { conv: Conv2d::depthwise(channels, k, stride, rng), bn: BatchNorm2d::new(channels) }
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array4<T>> {
        let y = self.conv.forward(x, train)?;
        self.bn.forward(&y, train)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let d = self.bn.backward(dy);
        self.conv.backward(&d)
    }

    pub fn select_out_channels(&self, rows: &[usize]) -> Self {
        ConvBn { conv: self.conv.select_out_channels(rows), bn: self.bn.select_channels(rows) }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    /// Convolution weights plus normalization scale and shift.
    pub fn params(&self) -> u64 {
        (self.conv.weight.len() + self.bn.scale.len() + self.bn.shift.len()) as u64
    }
}

impl<T: Scalar> Visit<T> for ConvBn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

#[derive(Clone, Debug)]
pub struct BypassStage<T> {
    pub unit: ConvBn<T>,
    pub relu: bool,
    out: Option<Array4<T>>,
}

/// The lightweight branch kept beside every sparse path.
#[derive(Clone, Debug)]
pub struct Bypass<T> {
    pub kind: BypassKind,
    pub width: usize,
    pub stages: Vec<BypassStage<T>>,
}

impl<T: Scalar> Bypass<T> {
    pub fn new<R: Rng + ?Sized>(
        kind: BypassKind,
        c_in: usize,
        c_out: usize,
        d: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let stage = |unit, relu| BypassStage { unit, relu, out: None };
        let (width, stages) = match kind {
            BypassKind::V2 => (
                d,
                vec![
                    stage(ConvBn::new(c_in, d, 1, 1, rng), true),
                    stage(ConvBn::depthwise(d, k, stride, rng), true),
                    stage(ConvBn::new(d, c_out, 1, 1, rng), false),
                ],
            ),
            BypassKind::V1 => (
                c_in,
                vec![
                    stage(ConvBn::depthwise(c_in, k, stride, rng), true),
                    stage(ConvBn::new(c_in, c_out, 1, 1, rng), false),
                ],
            ),
        };
        Bypass { kind, width, stages }
    }

    pub fn spec(&self) -> BypassSpec {
        BypassSpec { kind: self.kind, width: self.width }
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array4<T>> {
        let mut h = x.clone();
        for st in &mut self.stages {
            h = st.unit.forward(&h, train)?;
            if st.relu {
                h = relu(h);
                st.out = if train { Some(h.clone()) } else { None };
            }
        }
        Ok(h)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let mut d = dy.clone();
        for st in self.stages.iter_mut().rev() {
            if st.relu {
                let out = st.out.take().expect("bypass backward without training forward");
                d = relu_backward(&d, &out);
            }
            d = st.unit.backward(&d);
        }
        d
    }

    /// Multiply-accumulates per sample given the module's output extent.
    pub fn macs(&self, h_out: usize, w_out: usize, stride: usize) -> u64 {
        let mut total = 0;
        let mut at_input = true;
        for st in &self.stages {
            let conv = &st.unit.conv;
            if conv.stride > 1 || conv.depthwise {
                at_input = false;
            }
            total += if at_input {
                conv.macs(h_out * stride, w_out * stride)
            } else {
                conv.macs(h_out, w_out)
            };
        }
        total
    }

    pub fn params(&self) -> u64 {
        self.stages.iter().map(|s| s.unit.params()).sum()
    }
}

impl<T: Scalar> Visit<T> for Bypass<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, st) in self.stages.iter().enumerate() {
            st.unit.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, st) in self.stages.iter_mut().enumerate() {
            st.unit.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Bypass width for a given global target: `c_out`, or `⌈c_out/2⌉` for
/// targets below [`SMALL_TARGET_BOUNDARY`].
pub fn select_bypass_width(c_out: usize, c_target: f64) -> usize {
    if c_target < SMALL_TARGET_BOUNDARY {
        c_out.div_ceil(2).max(1)
    } else {
        c_out.max(1)
    }
}

#[derive(Clone, Debug)]
pub struct SbcModule<T> {
    pub sparse: ConvBn<T>,
    pub bypass: Bypass<T>,
    pub threshold: Param<T>,
    pub mask: MaskBundle<T>,
    /// When false the mask is a constant and the threshold gets no task gradient.
    pub mask_live: bool,
    pub stride: usize,
    sparse_out: Option<Array4<T>>,
}

impl<T: Scalar> SbcModule<T> {
    /// Builds a module with a fresh sparse path, bypass and a zero threshold.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        kind: BypassKind,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || d > c_out {
            return Err(domain(format!("bypass width {d} must lie in [1, {c_out}]")));
        }
        if [c_in, c_out, k, stride].contains(&0) {
            return Err(domain("module extents must be at least 1"));
        }
        let sparse = ConvBn::new(c_in, c_out, k, stride, rng);
        let bypass = Bypass::new(kind, c_in, c_out, d, k, stride, rng);
        Ok(SbcModule {
            sparse,
            bypass,
            threshold: Param::filled(ParamKind::Threshold, &[1], T::zero()),
            mask: MaskBundle::full(c_out),
            mask_live: false,
            stride,
            sparse_out: None,
        })
    }

    pub fn c_in(&self) -> usize {
        self.sparse.conv.in_channels
    }

    pub fn c_out(&self) -> usize {
        self.sparse.out_channels()
    }

    pub fn kernel(&self) -> usize {
        self.sparse.conv.kernel
    }

    pub fn threshold_value(&self) -> T {
        self.threshold.value.iter().copied().next().unwrap_or_else(T::zero)
    }

    pub fn set_threshold(&mut self, v: T) {
        self.threshold.value.fill(v);
    }

    pub fn threshold_grad_value(&self) -> T {
        self.threshold.grad.iter().copied().next().unwrap_or_else(T::zero)
    }

    pub fn add_threshold_grad(&mut self, g: T) {
        self.threshold.grad.mapv_inplace(|v| v + g);
    }

    pub fn sparse_weights(&self) -> ndarray::ArrayView4<'_, T> {
        self.sparse.conv.weight.value.view().into_dimensionality::<Ix4>().expect("4-d")
    }

    /// Recomputes importance, soft and hard masks from the current weights.
    pub fn refresh_mask(&mut self) -> Result<()> {
        self.mask = MaskBundle::compute(self.sparse_weights(), self.threshold_value())?;
        self.mask_live = true;
        Ok(())
    }

    /// Replaces the mask with a constant that carries no threshold gradient.
    pub fn freeze_mask(&mut self, hard: &[bool]) -> Result<()> {
        if hard.len() != self.c_out() {
            return Err(shape(format!("mask of length {} for {} filters", hard.len(), self.c_out())));
        }
        self.mask = MaskBundle::fixed(hard);
        self.mask_live = false;
        Ok(())
    }

    pub fn bypass_spec(&self) -> BypassSpec {
        self.bypass.spec()
    }

    /// Output before the network activation, using the stored mask.
    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array4<T>> {
        let z = self.sparse.forward(x, train)?;
        let ys = apply_mask(&z, &self.mask.hard_mask)?;
        let yb = self.bypass.forward(x, train)?;
        self.sparse_out = if train { Some(z) } else { None };
        Ok(ys + yb)
    }

    /// Output before the network activation with an explicit mask.
    pub fn forward_with_mask(&mut self, x: &Array4<T>, mask: &Array1<T>, train: bool) -> Result<Array4<T>> {
        if mask.len() != self.c_out() {
            return Err(shape(format!("mask of length {} for {} filters", mask.len(), self.c_out())));
        }
        let saved = std::mem::replace(&mut self.mask.hard_mask, mask.clone());
        let out = self.forward(x, train);
        self.mask.hard_mask = saved;
        out
    }

    /// Unmasked, normalized sparse-path output (inference mode).
    pub fn sparse_path_output(&mut self, x: &Array4<T>) -> Result<Array4<T>> {
        self.sparse.forward(x, false)
    }

    pub fn bypass_output(&mut self, x: &Array4<T>) -> Result<Array4<T>> {
        self.bypass.forward(x, false)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let z = self.sparse_out.take().expect("module backward without training forward");
        if self.mask_live {
            let mut upstream = Array1::zeros(self.c_out());
            for (c, u) in upstream.iter_mut().enumerate() {
                *u = Zip::from(&dy.index_axis(Axis(1), c))
                    .and(&z.index_axis(Axis(1), c))
                    .fold(T::zero(), |acc, &d, &v| acc + d * v);
            }
            let g = threshold_grad(&upstream, &self.mask.soft_mask);
            self.add_threshold_grad(g);
        }
        let dz = apply_mask(dy, &self.mask.hard_mask).expect("mask sized to module");
        let dx_sparse = self.sparse.backward(&dz);
        let dx_bypass = self.bypass.backward(dy);
        dx_sparse + dx_bypass
    }

    /// Sparse-path MACs at the current kept count plus bypass MACs.
    pub fn macs(&self, h_out: usize, w_out: usize) -> u64 {
        let per_filter = self.sparse.conv.macs(h_out, w_out) / self.c_out() as u64;
        per_filter * self.mask.kept_count as u64 + self.bypass.macs(h_out, w_out, self.stride)
    }

    /// Parameters with pruned filters and their normalization channels excluded.
    pub fn params(&self) -> u64 {
        let per_filter = self.sparse.params() / self.c_out() as u64;
        per_filter * self.mask.kept_count as u64 + self.bypass.params()
    }
}

impl<T: Scalar> Visit<T> for SbcModule<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.sparse.visit(&join(prefix, "sparse"), f);
        self.bypass.visit(&join(prefix, "bypass"), f);
        f(&join(prefix, "threshold"), &self.threshold);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.sparse.visit_mut(&join(prefix, "sparse"), f);
        self.bypass.visit_mut(&join(prefix, "bypass"), f);
        f(&join(prefix, "threshold"), &mut self.threshold);
    }
}

/// `relu(M ⊙ sparse(x) + bypass(x))` in inference mode.
pub fn sbc_forward<T: Scalar>(module: &mut SbcModule<T>, x: &Array4<T>, mask: &Array1<T>) -> Result<Array4<T>> {
    Ok(relu(module.forward_with_mask(x, mask, false)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flops::bypass_flops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn v2_shapes_and_zero_threshold() {
        let m = SbcModule::<f32>::new(16, 16, 3, 1, BypassKind::V2, 16, &mut rng()).unwrap();
        let shapes: Vec<Vec<usize>> = m.bypass.stages.iter().map(|s| s.unit.conv.weight.value.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![16, 16, 1, 1], vec![16, 1, 3, 3], vec![16, 16, 1, 1]]);
        assert_eq!(m.threshold_value(), 0.0);
        assert_eq!(m.sparse.conv.weight.value.shape(), &[16, 16, 3, 3]);
    }

    #[test]
    fn v1_has_depthwise_then_pointwise() {
        let m = SbcModule::<f32>::new(8, 16, 3, 2, BypassKind::V1, 16, &mut rng()).unwrap();
        assert_eq!(m.bypass.stages.len(), 2);
        assert!(m.bypass.stages[0].unit.conv.depthwise);
        assert_eq!(m.bypass.stages[0].unit.conv.weight.value.shape(), &[8, 1, 3, 3]);
        assert_eq!(m.bypass.stages[1].unit.conv.weight.value.shape(), &[16, 8, 1, 1]);
    }

    #[test]
    fn width_out_of_range_is_rejected() {
        assert!(SbcModule::<f32>::new(4, 4, 3, 1, BypassKind::V2, 5, &mut rng()).is_err());
        assert!(SbcModule::<f32>::new(4, 4, 3, 1, BypassKind::V2, 0, &mut rng()).is_err());
    }

    #[test]
    fn bypass_width_rule() {
        assert_eq!(select_bypass_width(64, 0.4), 64);
        assert_eq!(select_bypass_width(64, 0.18), 32);
        assert_eq!(select_bypass_width(1, 0.1), 1);
        assert_eq!(select_bypass_width(1, 0.9), 1);
        assert_eq!(select_bypass_width(5, 0.2), 3);
    }

    #[test]
    fn structural_macs_match_flops_model() {
        for (ci, co, d, s) in [(16, 16, 16, 1), (16, 32, 16, 2), (8, 8, 4, 1)] {
            let m = SbcModule::<f32>::new(ci, co, 3, s, BypassKind::V2, d, &mut rng()).unwrap();
            let h = 8;
            assert_eq!(m.bypass.macs(h, h, s), bypass_flops(ci, co, d, 3, h, h, s).unwrap());
        }
    }

    #[test]
    fn zero_mask_leaves_bypass_only() {
        let mut m = SbcModule::<f64>::new(3, 4, 3, 1, BypassKind::V2, 4, &mut rng()).unwrap();
        let x = Array4::from_shape_fn((2, 3, 5, 5), |(a, b, c, d)| ((a + 2 * b + 3 * c + d) as f64).sin());
        let y = sbc_forward(&mut m, &x, &Array1::zeros(4)).unwrap();
        let expect = relu(m.bypass_output(&x).unwrap());
        assert_eq!(y, expect);
    }

    #[test]
    fn zero_bypass_leaves_sparse_only() {
        let mut m = SbcModule::<f64>::new(3, 4, 3, 1, BypassKind::V2, 4, &mut rng()).unwrap();
        let last = m.bypass.stages.last_mut().unwrap();
        last.unit.conv.weight.value.fill(0.0);
        let x = Array4::from_shape_fn((2, 3, 5, 5), |(a, b, c, d)| ((a + b * c + d) as f64).cos());
        let y = sbc_forward(&mut m, &x, &Array1::ones(4)).unwrap();
        assert_eq!(y, relu(m.sparse_path_output(&x).unwrap()));
    }
}
