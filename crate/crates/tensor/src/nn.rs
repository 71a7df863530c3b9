//! Parameterised layers and the forward-pass context that binds a
//! [`ParamStore`] to a fresh [`Graph`].

use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::conv::Conv2dSpec;
use crate::ops::norm::{BatchStats, NormStats};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Running-statistics update produced by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: T,
    pub stats: BatchStats<T>,
}

/// One forward pass: the graph being recorded, read-only parameters and the
/// running-statistics updates to apply once the step is committed.
pub struct Ctx<'s, T: Real> {
    pub g: Graph<T>,
    store: &'s ParamStore<T>,
    phase: Phase,
    bound: HashMap<ParamId, Var>,
    updates: Vec<RunningUpdate<T>>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, phase: Phase) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            phase,
            bound: HashMap::new(),
            updates: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Leaf for parameter `id`, recorded once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.g.param(self.store, id);
        self.bound.insert(id, v);
        v
    }

    pub fn push_update(&mut self, u: RunningUpdate<T>) {
        self.updates.push(u);
    }

    pub fn finish(self) -> (Graph<T>, Vec<RunningUpdate<T>>) {
        (self.g, self.updates)
    }
}

/// Applies deferred running-statistics updates in recording order.
pub fn apply_running_updates<T: Real>(store: &mut ParamStore<T>, updates: &[RunningUpdate<T>]) {
    for u in updates {
        let mut mean = store.get(u.mean).data().to_vec();
        let mut var = store.get(u.var).data().to_vec();
        u.stats.update_running(u.momentum, &mut mean, &mut var);
        store.get_mut(u.mean).data_mut().copy_from_slice(&mean);
        store.get_mut(u.var).data_mut().copy_from_slice(&var);
    }
}

/// Uniform initialisation in `±gain/√fan_in`.
pub fn fan_in_uniform<T: Real>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    let bound = gain / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layer = Self::new_unbiased(store, name, din, dout, gain, rng);
        layer.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[dout])));
        layer
    }

    /// Without a bias, for layers followed by batch normalization, which
    /// cancels any bias.
    pub fn new_unbiased<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(&[dout, din], din, gain, rng));
        Linear {
            weight,
            bias: None,
            din,
            dout,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        spec: Conv2dSpec,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layer = Self::new_unbiased(store, name, cin, cout, ksize, spec, gain, rng);
        layer.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        layer
    }

    /// Without a bias, for layers followed by batch normalization.
    #[allow(clippy::too_many_arguments)]
    pub fn new_unbiased<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        spec: Conv2dSpec,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * ksize * ksize;
        let kernel = store.add(
            format!("{name}.kernel"),
            fan_in_uniform(&[cout, cin, ksize, ksize], fan_in, gain, rng),
        );
        Conv2d {
            kernel,
            bias: None,
            spec,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let k = ctx.param(self.kernel);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.g.conv2d(x, k, b, self.spec)
    }
}

/// Batch normalization layer over axis 1.
///
/// With running statistics the layer uses batch statistics in training and
/// the running estimates in evaluation; without them it always normalizes
/// with the statistics of the tensor it is given.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: Option<(ParamId, ParamId)>,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, features: usize, track_running: bool) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[features]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[features]));
        let running = track_running.then(|| {
            (
                store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[features])),
                store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[features])),
            )
        });
        BatchNorm {
            gamma,
            beta,
            running,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        let eps = T::from_f64_lossy(self.eps);
        match (self.running, ctx.phase()) {
            (Some((mean, var)), Phase::Eval) => {
                let stats = NormStats::Fixed {
                    mean: ctx.store().get(mean).data().to_vec(),
                    var: ctx.store().get(var).data().to_vec(),
                };
                Ok(ctx.g.batch_norm(x, gamma, beta, eps, stats)?.0)
            }
            (running, _) => {
                let (y, stats) = ctx.g.batch_norm(x, gamma, beta, eps, NormStats::Batch)?;
                if let (Some((mean, var)), Some(stats), Phase::Train) = (running, stats, ctx.phase()) {
                    ctx.push_update(RunningUpdate {
                        mean,
                        var,
                        momentum: T::from_f64_lossy(self.momentum),
                        stats,
                    });
                }
                Ok(y)
            }
        }
    }
}
