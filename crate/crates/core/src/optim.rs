use serde::{Deserialize, Serialize};

use crate::nn::Visit;
use crate::Scalar;

/// Momentum SGD with coupled weight decay:
/// `v ← μv + (g + λw)`, `w ← w − ηv`. Thresholds and buffers are exempt from decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<T: Scalar, N: Visit<T> + ?Sized>(&self, net: &mut N) {
        let lr = T::lit(self.lr);
        let mu = T::lit(self.momentum);
        let wd = T::lit(self.weight_decay);
        net.visit_mut("", &mut |_, p| {
            if !p.kind.trainable() {
                return;
            }
            let decay = p.kind.decays();
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.velocity)
                .and(&p.grad)
                .for_each(|w, v, &g| {
                    let d = if decay { g + wd * *w } else { g };
                    *v = mu * *v + d;
                    *w -= lr * *v;
                });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, ParamKind};

    struct Two(Param<f64>, Param<f64>);

    impl Visit<f64> for Two {
        fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f("w", &self.0);
            f("t", &self.1);
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f("w", &mut self.0);
            f("t", &mut self.1);
        }
    }

    #[test]
    fn thresholds_skip_weight_decay() {
        let mut net = Two(
            Param::filled(ParamKind::Weight, &[1], 1.0),
            Param::filled(ParamKind::Threshold, &[1], 1.0),
        );
        let sgd = Sgd { lr: 0.1, momentum: 0.9, weight_decay: 0.5 };
        sgd.step(&mut net);
        assert!((net.0.value[[0]] - 0.95).abs() < 1e-15);
        assert_eq!(net.1.value[[0]], 1.0);
        net.0.grad.fill(1.0);
        sgd.step(&mut net);
        // v = 0.9 * 0.5 + (1 + 0.5 * 0.95)
        let v = 0.45 + 1.475;
        assert!((net.0.value[[0]] - (0.95 - 0.1 * v)).abs() < 1e-15);
    }
}
