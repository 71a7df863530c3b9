//! Adam with bias correction and optional weight decay.

use crate::params::ParamStore;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights (AdamW) instead of adding
    /// `weight_decay · w` to the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            decoupled: false,
        }
    }
}

/// Optimizer state: per-parameter first and second moments plus step count.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Option<Vec<T>>>,
    second_moment: Vec<Option<Vec<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Updates every trainable tensor of `store` from its accumulated
    /// gradient (missing gradients count as zero).
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step_count += 1;
        let c = &self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (lr, eps, wd) = (c.lr, T::from_f64_lossy(c.eps), T::from_f64_lossy(c.weight_decay));
        let step_size = T::from_f64_lossy(lr / bias1);
        let bias2_sqrt = T::from_f64_lossy(bias2.sqrt());
        let decay_factor = T::from_f64_lossy(1.0 - lr * c.weight_decay);
        let ids: Vec<_> = store.trainable().collect();
        if self.first_moment.len() < store.len() {
            self.first_moment.resize_with(store.len(), || None);
            self.second_moment.resize_with(store.len(), || None);
        }
        for id in ids {
            let p = store.get_mut(id);
            let n = p.numel();
            let grad: Vec<T> = p.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); n]);
            let m = self.first_moment[id.index()].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.second_moment[id.index()].get_or_insert_with(|| vec![T::zero(); n]);
            let w = p.data_mut();
            for i in 0..n {
                let mut g = grad[i];
                if !c.decoupled {
                    g += wd * w[i];
                }
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                if c.decoupled {
                    w[i] *= decay_factor;
                }
                w[i] -= step_size * m[i] / (v[i].sqrt() / bias2_sqrt + eps);
            }
        }
    }
}
