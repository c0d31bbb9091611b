use ndarray::{Array2, Array4, Axis};

use crate::Scalar;

/// Mean over the spatial extent, `N×C×H×W → N×C`.
pub fn global_avg_pool<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (_, _, h, w) = x.dim();
    let inv = T::one() / T::lit((h * w) as f64);
    x.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv_into(|v| v * inv)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Array2<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c) = dy.dim();
    let inv = T::one() / T::lit((h * w) as f64);
    Array4::from_shape_fn((n, c, h, w), |(i, ch, _, _)| dy[[i, ch]] * inv)
}

/// Flat argmax positions and the input shape they index.
type Winners = (Vec<usize>, (usize, usize, usize, usize));

/// 2×2 max pooling with stride 2.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    argmax: Option<Winners>,
}

impl MaxPool2 {
    pub fn forward<T: Scalar>(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array4::zeros((n, c, ho, wo));
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        for (o, v) in out.iter_mut().enumerate() {
            let ox = o % wo;
            let oy = (o / wo) % ho;
            let plane = o / (wo * ho);
            let base = plane * h * w;
            let mut best = base + 2 * oy * w + 2 * ox;
            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                if xs[idx] > xs[best] {
                    best = idx;
                }
            }
            *v = xs[best];
            arg.push(best);
        }
        self.argmax = if train { Some((arg, (n, c, h, w))) } else { None };
        out
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (arg, dim) = self.argmax.take().expect("pool backward without training forward");
        let mut dx = Array4::zeros(dim);
        let dxs = dx.as_slice_mut().expect("standard layout");
        for (g, &idx) in dy.as_standard_layout().iter().zip(&arg) {
            dxs[idx] += *g;
        }
        dx
    }
}
