use ndarray::{Array1, Array4, Axis, Ix1};

use super::{join, Param, ParamKind, Visit};
use crate::error::{shape, Result};
use crate::Scalar;

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with affine scale and shift.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<NormCache<T>>,
}

#[derive(Clone, Debug)]
struct NormCache<T> {
    x_hat: Array4<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            scale: Param::filled(ParamKind::NormScale, &[channels], T::one()),
            shift: Param::filled(ParamKind::NormShift, &[channels], T::zero()),
            running_mean: Param::filled(ParamKind::Buffer, &[channels], T::zero()),
            running_var: Param::filled(ParamKind::Buffer, &[channels], T::one()),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn select_channels(&self, rows: &[usize]) -> Self {
        BatchNorm2d {
            scale: self.scale.select_rows(rows),
            shift: self.shift.select_rows(rows),
            running_mean: self.running_mean.select_rows(rows),
            running_var: self.running_var.select_rows(rows),
            cache: None,
        }
    }

    fn vec(p: &Param<T>) -> ndarray::ArrayView1<'_, T> {
        p.value.view().into_dimensionality::<Ix1>().expect("1-d norm param")
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array4<T>> {
        let (n, c, h, w) = x.dim();
        if c != self.channels() {
            return Err(shape(format!("norm expects {} channels, got {c}", self.channels())));
        }
        let eps = T::lit(EPS);
        let (mean, inv_std) = if train {
            let count = T::lit((n * h * w) as f64);
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for (ch, xc) in x.axis_iter(Axis(1)).enumerate() {
                let m = xc.sum() / count;
                let v = xc.fold(T::zero(), |acc, &e| acc + (e - m) * (e - m)) / count;
                mean[ch] = m;
                var[ch] = v;
            }
            let m = T::lit(MOMENTUM);
            let unbias = if n * h * w > 1 {
                count / (count - T::one())
            } else {
                T::one()
            };
            {
                let mut rm = self.running_mean.value.view_mut().into_dimensionality::<Ix1>().expect("1-d");
                let mut rv = self.running_var.value.view_mut().into_dimensionality::<Ix1>().expect("1-d");
                for ch in 0..c {
                    rm[ch] = (T::one() - m) * rm[ch] + m * mean[ch];
                    rv[ch] = (T::one() - m) * rv[ch] + m * var[ch] * unbias;
                }
            }
            let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
            (mean, inv_std)
        } else {
            let mean = Self::vec(&self.running_mean).to_owned();
            let inv_std = Self::vec(&self.running_var).mapv(|v| T::one() / (v + eps).sqrt());
            (mean, inv_std)
        };

        let mut x_hat = x.to_owned();
        for (ch, mut xc) in x_hat.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (mean[ch], inv_std[ch]);
            xc.mapv_inplace(|e| (e - m) * s);
        }
        let gamma = Self::vec(&self.scale);
        let beta = Self::vec(&self.shift);
        let mut out = x_hat.clone();
        for (ch, mut oc) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (gamma[ch], beta[ch]);
            oc.mapv_inplace(|e| e * g + b);
        }
        self.cache = if train { Some(NormCache { x_hat, inv_std }) } else { None };
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let NormCache { x_hat, inv_std } = self.cache.take().expect("norm backward without training forward");
        let (n, c, h, w) = dy.dim();
        let count = T::lit((n * h * w) as f64);
        let gamma = Self::vec(&self.scale).to_owned();
        let mut dx = Array4::zeros((n, c, h, w));
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(1), ch);
            let xc = x_hat.index_axis(Axis(1), ch);
            let sum_dy = dyc.sum();
            let sum_dy_x = ndarray::Zip::from(&dyc)
                .and(&xc)
                .fold(T::zero(), |acc, &d, &xh| acc + d * xh);
            dgamma[ch] = sum_dy_x;
            dbeta[ch] = sum_dy;
            let k = gamma[ch] * inv_std[ch] / count;
            let mut dxc = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xc)
                .for_each(|o, &d, &xh| *o = k * (count * d - sum_dy - xh * sum_dy_x));
        }
        let mut gs = self.scale.grad.view_mut().into_dimensionality::<Ix1>().expect("1-d");
        gs += &dgamma;
        let mut gb = self.shift.grad.view_mut().into_dimensionality::<Ix1>().expect("1-d");
        gb += &dbeta;
        dx
    }
}

impl<T: Scalar> Visit<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "scale"), &self.scale);
        f(&join(prefix, "shift"), &self.shift);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "scale"), &mut self.scale);
        f(&join(prefix, "shift"), &mut self.shift);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn training_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array4::from_shape_simple_fn((4, 3, 5, 5), || rng.random_range(-3.0..7.0));
        let mut bn = BatchNorm2d::<f64>::new(3);
        let y = bn.forward(&x, true).unwrap();
        for yc in y.axis_iter(Axis(1)) {
            let m = yc.mean().unwrap();
            let v = yc.mapv(|e| (e - m) * (e - m)).mean().unwrap();
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array4::from_shape_simple_fn((2, 2, 3, 3), || rng.random_range(-1.0..1.0));
        let u = Array4::from_shape_simple_fn((2, 2, 3, 3), || rng.random_range(-1.0..1.0));
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.scale.value.as_slice_mut().unwrap().copy_from_slice(&[0.7, -1.3]);
        bn.shift.value.as_slice_mut().unwrap().copy_from_slice(&[0.2, 0.5]);
        bn.forward(&x, true).unwrap();
        let dx = bn.backward(&u);
        let eps = 1e-6;
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = x.as_slice().unwrap()[idx];
            let mut probe = bn.clone();
            xp.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = (probe.forward(&xp, true).unwrap() * &u).sum();
            xp.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = (probe.forward(&xp, true).unwrap() * &u).sum();
            xp.as_slice_mut().unwrap()[idx] = orig;
            assert!(((lp - lm) / (2.0 * eps) - dx.as_slice().unwrap()[idx]).abs() < 1e-7);
        }
    }
}
