//! Momentum SGD with step learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    /// Multiplier applied every `decay_every` episodes.
    pub lr_decay: f64,
    pub decay_every: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { base_lr: 0.001, momentum: 0.9, lr_decay: 0.1, decay_every: 3000 }
    }
}

impl OptimizerConfig {
    /// Learning rate in effect for a zero-based episode index.
    pub fn lr_at(&self, episode: u64) -> f64 {
        let steps = episode.checked_div(self.decay_every).unwrap_or(0);
        self.base_lr * self.lr_decay.powi(steps.min(i32::MAX as u64) as i32)
    }
}

/// `v <- momentum * v + g; p <- p - lr * v`, one velocity buffer per
/// parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: ParamStore,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: ParamStore::new() }
    }

    /// Updates every entry of `params` whose bound var received a gradient.
    pub fn step(&mut self, params: &mut ParamStore, bound: &Bound, grads: &mut Gradients) {
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.take(bound.var(name)) else { continue };
            self.update(name, p, &g);
        }
    }

    pub fn update(&mut self, name: &str, p: &mut Tensor, g: &Tensor) {
        if !self.velocity.contains(name) {
            self.velocity.insert(name, Tensor::zeros(p.shape().to_vec()));
        }
        let v = self.velocity.get_mut(name).expect("inserted above");
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = self.momentum * *vv + gv;
            *pv -= self.lr * *vv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_by_tenth_every_3000() {
        let c = OptimizerConfig::default();
        assert_eq!(c.lr_at(0), 0.001);
        assert_eq!(c.lr_at(2999), 0.001);
        assert!((c.lr_at(3000) - 0.0001).abs() < 1e-18);
        assert!((c.lr_at(6001) - 0.00001).abs() < 1e-18);
    }

    #[test]
    fn momentum_update_by_hand() {
        let mut s = Sgd::new(0.1, 0.9);
        let mut p = Tensor::new([1], vec![1.0]);
        let g = Tensor::new([1], vec![2.0]);
        s.update("w", &mut p, &g);
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        s.update("w", &mut p, &g);
        // v = 0.9 * 2 + 2 = 3.8
        assert!((p.data()[0] - 0.42).abs() < 1e-15);
    }
}
