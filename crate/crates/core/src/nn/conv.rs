use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::Rng;

use super::{join, Param, Visit};
use crate::error::{shape, Result};
use crate::Scalar;

/// 2-D convolution without bias, "same" padding of `k / 2`.
///
/// Weight layout is `c_out × c_in × k × k`, or `c × 1 × k × k` when depthwise.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
    input: Option<Array4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let weight = Param::fan_in_uniform(
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
            rng,
        );
        Self::from_weight(weight, in_channels, kernel, stride, false)
    }

    pub fn depthwise<R: Rng + ?Sized>(channels: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let weight = Param::fan_in_uniform(&[channels, 1, kernel, kernel], kernel * kernel, rng);
        Self::from_weight(weight, channels, kernel, stride, true)
    }

    pub fn from_weight(
        weight: Param<T>,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        depthwise: bool,
    ) -> Self {
        let out_channels = weight.value.shape()[0];
        Conv2d {
            weight,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            depthwise,
            input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        ((h + 2 * p - k) / self.stride + 1, (w + 2 * p - k) / self.stride + 1)
    }

    /// Multiply-accumulates for one sample, read off the weight tensor shape.
    pub fn macs(&self, h_out: usize, w_out: usize) -> u64 {
        (h_out * w_out * self.weight.len()) as u64
    }

    /// Copy of this convolution restricted to the listed output filters.
    pub fn select_out_channels(&self, rows: &[usize]) -> Self {
        let weight = self.weight.select_rows(rows);
        Conv2d {
            out_channels: rows.len(),
            weight,
            input: None,
            ..self.clone()
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array4<T>> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let x = x.as_standard_layout().into_owned();
        let (ho, wo) = self.output_size(h, w);
        let mut out = Array4::zeros((n, self.out_channels, ho, wo));
        if self.depthwise {
            self.depthwise_forward(&x, &mut out);
        } else {
            let co = self.out_channels;
            let w2 = self.weight2();
            let cols = self.batch_cols(&x, (ho, wo));
            let mut out2 = Array2::zeros((co, n * ho * wo));
            general_mat_mul(T::one(), &w2, &cols, T::zero(), &mut out2);
            let out2 = out2.into_shape_with_order((co, n, ho * wo)).expect("contiguous");
            let mut o3 = out.view_mut().into_shape_with_order((n, co, ho * wo)).expect("contiguous output");
            o3.assign(&out2.permuted_axes([1, 0, 2]));
        }
        self.input = if train { Some(x) } else { None };
        Ok(out)
    }

    fn weight2(&self) -> ArrayView2<'_, T> {
        let ckk = self.weight.len() / self.out_channels;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, ckk))
            .expect("contiguous weight")
    }

    /// Patch matrix for the whole batch: `c·k·k` rows, one column per
    /// (sample, output position) pair, sample-major.
    fn batch_cols(&self, x: &Array4<T>, (ho, wo): (usize, usize)) -> Array2<T> {
        let (n, c, h, w) = x.dim();
        let k = self.kernel;
        let hw = ho * wo;
        let mut cols = Array2::zeros((c * k * k, n * hw));
        let ld = n * hw;
        let cs = cols.as_slice_mut().expect("standard layout");
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            im2col(
                xi.as_slice().expect("standard layout"),
                (c, h, w),
                k,
                self.stride,
                self.padding,
                (ho, wo),
                &mut cs[i * hw..],
                ld,
            );
        }
        cols
    }

    /// Accumulates the weight gradient and returns the input gradient.
    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let x = self.input.take().expect("conv backward without training forward");
        let (n, c, h, w) = x.dim();
        let mut dx = Array4::zeros((n, c, h, w));
        let dy = dy.as_standard_layout().into_owned();
        if self.depthwise {
            self.depthwise_backward(&x, &dy, &mut dx);
            return dx;
        }
        let k = self.kernel;
        let (_, co, ho, wo) = dy.dim();
        let hw = ho * wo;
        let ckk = c * k * k;
        let dy2 = dy
            .view()
            .into_shape_with_order((n, co, hw))
            .expect("contiguous grad")
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((co, n * hw))
            .expect("contiguous");
        let cols = self.batch_cols(&x, (ho, wo));
        let mut g = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order((co, ckk))
            .expect("contiguous grad");
        general_mat_mul(T::one(), &dy2, &cols.t(), T::one(), &mut g);
        drop(cols);
        let mut dcols = Array2::zeros((ckk, n * hw));
        general_mat_mul(T::one(), &self.weight2().t(), &dy2, T::zero(), &mut dcols);
        let ds = dcols.as_slice().expect("standard layout");
        for i in 0..n {
            let mut dxi = dx.index_axis_mut(Axis(0), i);
            col2im(
                &ds[i * hw..],
                (c, h, w),
                k,
                self.stride,
                self.padding,
                (ho, wo),
                n * hw,
                dxi.as_slice_mut().expect("standard layout"),
            );
        }
        dx
    }

    fn depthwise_forward(&self, x: &Array4<T>, out: &mut Array4<T>) {
        let (n, c, h, w) = x.dim();
        let (_, _, ho, wo) = out.dim();
        let k = self.kernel;
        let wt = self.weight.value.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        for i in 0..n {
            for ch in 0..c {
                let xb = (i * c + ch) * h * w;
                let ob = (i * c + ch) * ho * wo;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[(ch * k + ky) * k + kx];
                        let Some((x0, x1)) = self.tap_columns(kx, w, wo) else { continue };
                        for oy in 0..ho {
                            let Some(iy) = self.tap_row(oy, ky, h) else { continue };
                            let orow = &mut os[ob + oy * wo + x0..ob + oy * wo + x1];
                            let ibase = xb + iy * w;
                            self.row_taps(orow, x0, kx, |o, ix| *o += wv * xs[ibase + ix]);
                        }
                    }
                }
            }
        }
    }

    fn depthwise_backward(&mut self, x: &Array4<T>, dy: &Array4<T>, dx: &mut Array4<T>) {
        let (n, c, h, w) = x.dim();
        let (_, _, ho, wo) = dy.dim();
        let k = self.kernel;
        let wt = self.weight.value.as_slice().expect("standard layout").to_vec();
        let mut dw = vec![T::zero(); wt.len()];
        let xs = x.as_slice().expect("standard layout");
        let ds = dy.as_slice().expect("standard layout");
        let dxs = dx.as_slice_mut().expect("standard layout");
        for i in 0..n {
            for ch in 0..c {
                let xb = (i * c + ch) * h * w;
                let ob = (i * c + ch) * ho * wo;
                for ky in 0..k {
                    for kx in 0..k {
                        let t = (ch * k + ky) * k + kx;
                        let wv = wt[t];
                        let Some((x0, x1)) = self.tap_columns(kx, w, wo) else { continue };
                        let mut acc = T::zero();
                        for oy in 0..ho {
                            let Some(iy) = self.tap_row(oy, ky, h) else { continue };
                            let grow = &ds[ob + oy * wo + x0..ob + oy * wo + x1];
                            let ibase = xb + iy * w;
                            let s = self.stride;
                            let first = x0 * s + kx - self.padding;
                            for (j, &g) in grow.iter().enumerate() {
                                let ix = ibase + first + j * s;
                                acc += g * xs[ix];
                                dxs[ix] += g * wv;
                            }
                        }
                        dw[t] += acc;
                    }
                }
            }
        }
        for (g, d) in self.weight.grad.iter_mut().zip(dw) {
            *g += d;
        }
    }

    /// Input row read by output row `oy` at kernel row `ky`, if inside the image.
    fn tap_row(&self, oy: usize, ky: usize, h: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        (iy < h).then_some(iy)
    }

    /// Output column range `[x0, x1)` whose kernel column `kx` lands inside the image.
    fn tap_columns(&self, kx: usize, w: usize, wo: usize) -> Option<(usize, usize)> {
        let (s, p) = (self.stride, self.padding);
        let x0 = if p > kx { (p - kx).div_ceil(s) } else { 0 };
        let x1 = ((w - 1 + p).checked_sub(kx)? / s + 1).min(wo);
        (x0 < x1).then_some((x0, x1))
    }

    fn row_taps(&self, orow: &mut [T], x0: usize, kx: usize, mut f: impl FnMut(&mut T, usize)) {
        let s = self.stride;
        let first = x0 * s + kx - self.padding;
        for (j, o) in orow.iter_mut().enumerate() {
            f(o, first + j * s);
        }
    }
}

impl<T: Scalar> Visit<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}

/// Output columns `[x0, x1)` whose input column `ox·s + kx − p` lies in `[0, w)`.
fn valid_columns(kx: usize, s: usize, p: usize, w: usize, wo: usize) -> (usize, usize) {
    let x0 = if p > kx { (p - kx).div_ceil(s) } else { 0 };
    let x1 = match (w - 1 + p).checked_sub(kx) {
        Some(last) => (last / s + 1).min(wo),
        None => 0,
    };
    (x0.min(x1), x1)
}

/// Writes the patch rows of one sample. Row `r` starts at `cols[r · ld]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
    (ho, wo): (usize, usize),
    cols: &mut [T],
    ld: usize,
) {
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ld;
                let (x0, x1) = valid_columns(kx, s, p, w, wo);
                for oy in 0..ho {
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    let iy = (oy * s + ky).checked_sub(p).filter(|&iy| iy < h);
                    let Some(iy) = iy else {
                        dst.fill(T::zero());
                        continue;
                    };
                    dst[..x0].fill(T::zero());
                    dst[x1..].fill(T::zero());
                    if x0 == x1 {
                        continue;
                    }
                    let src = (ci * h + iy) * w + x0 * s + kx - p;
                    if s == 1 {
                        dst[x0..x1].copy_from_slice(&x[src..src + (x1 - x0)]);
                    } else {
                        for (j, d) in dst[x0..x1].iter_mut().enumerate() {
                            *d = x[src + j * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch rows back into the input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
    (ho, wo): (usize, usize),
    ld: usize,
    dx: &mut [T],
) {
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ld;
                let (x0, x1) = valid_columns(kx, s, p, w, wo);
                if x0 == x1 {
                    continue;
                }
                for oy in 0..ho {
                    let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&iy| iy < h) else { continue };
                    let src = &cols[row + oy * wo + x0..row + oy * wo + x1];
                    let base = (ci * h + iy) * w + x0 * s + kx - p;
                    if s == 1 {
                        for (d, &v) in dx[base..base + (x1 - x0)].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            dx[base + j * s] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Array4<f64>, wt: &Array4<f64>, stride: usize, depthwise: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (co, _, k, _) = wt.dim();
        let p = (k / 2) as isize;
        let ho = (h + 2 * (k / 2) - k) / stride + 1;
        let wo = (w + 2 * (k / 2) - k) / stride + 1;
        let mut out = Array4::zeros((n, co, ho, wo));
        for i in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        let chans: Vec<(usize, usize)> = if depthwise {
                            vec![(o, 0)]
                        } else {
                            (0..c).map(|ci| (ci, ci)).collect()
                        };
                        for (ci, wi) in chans {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - p;
                                    let ix = (ox * stride + kx) as isize - p;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[[o, wi, ky, kx]] * x[[i, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[i, o, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn random4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(c, co, k, s, dw) in &[
            (3, 4, 3, 1, false),
            (3, 5, 3, 2, false),
            (4, 2, 1, 1, false),
            (4, 3, 1, 2, false),
            (4, 4, 3, 1, true),
            (4, 4, 3, 2, true),
        ] {
            let mut conv = if dw {
                Conv2d::<f64>::depthwise(c, k, s, &mut rng)
            } else {
                Conv2d::<f64>::new(c, co, k, s, &mut rng)
            };
            let x = random4(&mut rng, (2, c, 6, 5));
            let y = conv.forward(&x, false).unwrap();
            let expect = naive_conv(&x, &conv.weight.value.clone().into_dimensionality().unwrap(), s, dw);
            assert_eq!(y.dim(), expect.dim());
            for (a, b) in y.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(c, co, k, s, dw) in &[(2, 3, 3, 1, false), (2, 3, 3, 2, false), (3, 3, 3, 2, true), (3, 2, 1, 1, false)] {
            let mut conv = if dw {
                Conv2d::<f64>::depthwise(c, k, s, &mut rng)
            } else {
                Conv2d::<f64>::new(c, co, k, s, &mut rng)
            };
            let x = random4(&mut rng, (2, c, 5, 4));
            let y = conv.forward(&x, true).unwrap();
            let u = random4(&mut rng, y.dim());
            conv.weight.zero_grad();
            let dx = conv.backward(&u);
            let loss = |conv: &mut Conv2d<f64>, x: &Array4<f64>| (conv.forward(x, false).unwrap() * &u).sum();
            let eps = 1e-6;
            for idx in 0..conv.weight.len() {
                let orig = conv.weight.value.as_slice().unwrap()[idx];
                conv.weight.value.as_slice_mut().unwrap()[idx] = orig + eps;
                let lp = loss(&mut conv, &x);
                conv.weight.value.as_slice_mut().unwrap()[idx] = orig - eps;
                let lm = loss(&mut conv, &x);
                conv.weight.value.as_slice_mut().unwrap()[idx] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - conv.weight.grad.as_slice().unwrap()[idx]).abs() < 1e-7);
            }
            let mut xp = x.clone();
            for idx in 0..x.len() {
                let orig = x.as_slice().unwrap()[idx];
                xp.as_slice_mut().unwrap()[idx] = orig + eps;
                let lp = loss(&mut conv, &xp);
                xp.as_slice_mut().unwrap()[idx] = orig - eps;
                let lm = loss(&mut conv, &xp);
                xp.as_slice_mut().unwrap()[idx] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - dx.as_slice().unwrap()[idx]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::<f32>::new(3, 4, 3, 1, &mut rng);
        assert!(conv.forward(&Array4::zeros((1, 2, 4, 4)), false).is_err());
    }
}
