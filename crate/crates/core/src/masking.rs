//! Filter importance, learnable thresholds, and the soft/hard mask pair with
//! straight-through gradients.
//!
//! The importance vector is treated as a constant when differentiating the
//! soft mask: gradients from the mask only ever reach the threshold.

use ndarray::{Array1, Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::Scalar;

/// `I[i] = ‖W[i]‖₁` for each output filter of a `c_out × c_in × k × k` tensor.
pub fn importance_l1<T: Scalar>(weights: ArrayView4<'_, T>) -> Result<Array1<T>> {
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(domain("non-finite weight in importance computation"));
    }
    Ok(weights
        .axis_iter(Axis(0))
        .map(|filter| filter.iter().map(|w| w.abs()).sum())
        .collect())
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        // Tiny negative inputs would otherwise round up to exactly 0.5 and
        // flip the hard mask; clamp to the largest value below one half.
        let e = x.exp();
        (e / (T::one() + e)).min(T::lit(0.5) - T::epsilon() * T::lit(0.25))
    }
}

/// `G = sigmoid(I − δ)`.
pub fn soft_mask<T: Scalar>(importance: &Array1<T>, threshold: T) -> Array1<T> {
    importance.mapv(|i| sigmoid(i - threshold))
}

/// Forward of the straight-through binarization: `1` where `G ≥ 0.5`.
pub fn binarize_ste<T: Scalar>(soft: &Array1<T>) -> Array1<T> {
    let half = T::lit(0.5);
    soft.mapv(|g| if g >= half { T::one() } else { T::zero() })
}

/// Backward of the straight-through binarization: the identity.
pub fn binarize_ste_backward<T: Scalar>(upstream: &Array1<T>) -> Array1<T> {
    upstream.clone()
}

/// `∂G[i]/∂δ = −G[i](1 − G[i])`.
pub fn soft_mask_threshold_slope<T: Scalar>(soft: &Array1<T>) -> Array1<T> {
    soft.mapv(|g| -(g * (T::one() - g)))
}

/// Gradient reaching the threshold from an upstream gradient on the hard mask.
pub fn threshold_grad<T: Scalar>(upstream_on_mask: &Array1<T>, soft: &Array1<T>) -> T {
    let through_ste = binarize_ste_backward(upstream_on_mask);
    through_ste
        .iter()
        .zip(soft_mask_threshold_slope(soft).iter())
        .map(|(&u, &s)| u * s)
        .sum()
}

/// Zeroes the channels of `x` (`N × C × H × W`) whose mask entry is zero.
pub fn apply_mask<T: Scalar>(x: &Array4<T>, mask: &Array1<T>) -> Result<Array4<T>> {
    let c = x.dim().1;
    if mask.len() != c {
        return Err(shape(format!("mask of length {} for {c} channels", mask.len())));
    }
    let mut out = x.clone();
    for (mut plane, &m) in out.axis_iter_mut(Axis(1)).zip(mask.iter()) {
        if m == T::zero() {
            plane.fill(T::zero());
        } else if m != T::one() {
            plane.mapv_inplace(|v| v * m);
        }
    }
    Ok(out)
}

/// Per-module importance, threshold and the derived masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBundle<T> {
    pub importance: Array1<T>,
    pub threshold: T,
    pub soft_mask: Array1<T>,
    pub hard_mask: Array1<T>,
    pub kept_count: usize,
}

impl<T: Scalar> MaskBundle<T> {
    pub fn compute(weights: ArrayView4<'_, T>, threshold: T) -> Result<Self> {
        let importance = importance_l1(weights)?;
        let soft_mask = soft_mask(&importance, threshold);
        let hard_mask = binarize_ste(&soft_mask);
        let kept_count = hard_mask.iter().filter(|&&m| m == T::one()).count();
        Ok(MaskBundle { importance, threshold, soft_mask, hard_mask, kept_count })
    }

    /// All filters kept; used before the first refresh.
    pub fn full(channels: usize) -> Self {
        MaskBundle {
            importance: Array1::zeros(channels),
            threshold: T::zero(),
            soft_mask: Array1::from_elem(channels, T::one()),
            hard_mask: Array1::from_elem(channels, T::one()),
            kept_count: channels,
        }
    }

    /// Fixed mask with no gradient path to a threshold.
    pub fn fixed(hard: &[bool]) -> Self {
        let hard_mask: Array1<T> = hard.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        MaskBundle {
            importance: Array1::zeros(hard.len()),
            threshold: T::zero(),
            soft_mask: hard_mask.clone(),
            kept_count: hard.iter().filter(|&&b| b).count(),
            hard_mask,
        }
    }

    pub fn channels(&self) -> usize {
        self.hard_mask.len()
    }

    pub fn hard_bits(&self) -> Vec<bool> {
        self.hard_mask.iter().map(|&m| m == T::one()).collect()
    }

    pub fn pruning_rate(&self) -> f64 {
        1.0 - self.kept_count as f64 / self.channels() as f64
    }
}

/// Serializable part of a mask bundle stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub threshold: f64,
    pub hard_mask: Vec<bool>,
    pub kept_count: usize,
}

impl<T: Scalar> From<&MaskBundle<T>> for MaskRecord {
    fn from(b: &MaskBundle<T>) -> Self {
        MaskRecord { threshold: b.threshold.as_f64(), hard_mask: b.hard_bits(), kept_count: b.kept_count }
    }
}
