//! Minimal CPU layers with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during a training-mode
//! forward call. Gradients accumulate into [`Param::grad`] until cleared.

mod conv;
mod linear;
mod loss;
mod norm;
mod pool;

pub use conv::Conv2d;
pub use linear::Linear;
pub use loss::softmax_cross_entropy;
pub use norm::BatchNorm2d;
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2};

use ndarray::{Array4, ArrayD, IxDyn, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::Scalar;

/// Role of a stored tensor; decides optimizer treatment and parameter counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Learnable pruning threshold; updated without weight decay.
    Threshold,
    /// Non-trainable state such as normalization running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::Threshold | ParamKind::Buffer)
    }

    pub fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::NormScale => 2,
            ParamKind::NormShift => 3,
            ParamKind::Threshold => 4,
            ParamKind::Buffer => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::NormScale,
            3 => ParamKind::NormShift,
            4 => ParamKind::Threshold,
            5 => ParamKind::Buffer,
            _ => return None,
        })
    }
}

/// A tensor together with its gradient and momentum buffer.
///
/// The momentum buffer travels with the value so that gathering kept rows
/// during surgery carries optimizer state along.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub kind: ParamKind,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub velocity: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(kind: ParamKind, value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let velocity = ArrayD::zeros(value.raw_dim());
        Param { kind, value, grad, velocity }
    }

    pub fn filled(kind: ParamKind, shape: &[usize], v: T) -> Self {
        Self::new(kind, ArrayD::from_elem(IxDyn(shape), v))
    }

    /// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            T::lit(rng.random_range(-bound..bound))
        });
        Self::new(ParamKind::Weight, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Keep only the listed indices along axis 0 of value, gradient and velocity.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let ax = ndarray::Axis(0);
        Param {
            kind: self.kind,
            value: self.value.select(ax, rows),
            grad: self.grad.select(ax, rows),
            velocity: self.velocity.select(ax, rows),
        }
    }
}

/// Access to every stored tensor of a layer or network, by dotted name.
pub trait Visit<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn relu<T: Scalar>(x: Array4<T>) -> Array4<T> {
    x.mapv_into(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of `relu` given its forward output.
pub fn relu_backward<T: Scalar>(dy: &Array4<T>, out: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(out).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}
