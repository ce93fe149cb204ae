use crate::autodiff::{Precision, Tensor};
use crate::params::ParamStore;

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with per-parameter learning rates. A rate of zero skips
    /// the parameter entirely, moments included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lrs: &[f64], precision: Precision) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, param) in store.tensors_mut().iter_mut().enumerate() {
            let lr = lrs[i];
            if lr == 0.0 {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p = precision.round(*p - update);
            }
        }
    }
}

/// Rescale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Only entries with `include[i]` count and are scaled. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], include: &[bool], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .zip(include)
        .filter(|(_, &inc)| inc)
        .flat_map(|(g, _)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (g, _) in grads.iter_mut().zip(include).filter(|(_, &inc)| inc) {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Base rate, multiplied once by `factor` from `decay_epoch` (0-based) on.
pub fn lr_schedule(epoch: usize, base: f64, decay_epoch: usize, factor: f64) -> f64 {
    if epoch >= decay_epoch {
        base * factor
    } else {
        base
    }
}
