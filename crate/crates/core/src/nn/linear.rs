use ndarray::{Array2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, Param, ParamKind, Visit};
use crate::error::{shape, Result};
use crate::Scalar;

/// Fully connected layer `y = x Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let weight = Param::fan_in_uniform(&[outputs, inputs], inputs, rng);
        let mut bias = Param::fan_in_uniform(&[outputs], inputs, rng);
        bias.kind = ParamKind::Bias;
        Linear { weight, bias, input: None }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn macs(&self) -> u64 {
        self.weight.len() as u64
    }

    pub fn forward(&mut self, x: &Array2<T>, train: bool) -> Result<Array2<T>> {
        if x.ncols() != self.inputs() {
            return Err(shape(format!("linear expects {} inputs, got {}", self.inputs(), x.ncols())));
        }
        let w = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d");
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-d");
        let y = x.dot(&w.t()) + b;
        self.input = if train { Some(x.to_owned()) } else { None };
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let x = self.input.take().expect("linear backward without training forward");
        let w = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d");
        let dx = dy.dot(&w);
        let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-d");
        gw += &dy.t().dot(&x);
        let mut gb = self.bias.grad.view_mut().into_dimensionality::<Ix1>().expect("1-d");
        gb += &dy.sum_axis(Axis(0));
        dx
    }
}

impl<T: Scalar> Visit<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
