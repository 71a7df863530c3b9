//! Batch normalization with per-feature statistics.
//!
//! The feature axis is axis 1; statistics are taken over every other axis,
//! so `(N, F)` normalizes each feature over the batch and `(N, C, H, W)`
//! normalizes each channel over batch and space.

use crate::error::{Result, TensorError};
use crate::graph::{Backward, BackwardCtx, GradSink, Graph, Var};
use crate::real::Real;

/// Which statistics normalize the input.
#[derive(Clone, Debug)]
pub enum NormStats<T> {
    /// Statistics of the current batch (training behaviour).
    Batch,
    /// Externally supplied mean and (biased) variance, e.g. running estimates.
    Fixed { mean: Vec<T>, var: Vec<T> },
}

/// Per-feature statistics observed in a `NormStats::Batch` pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of values each statistic was computed from.
    pub count: usize,
}

impl<T: Real> BatchStats<T> {
    /// Exponential moving average update: `r ← (1-m)·r + m·batch`, using the
    /// unbiased variance for the running estimate.
    pub fn update_running(&self, momentum: T, running_mean: &mut [T], running_var: &mut [T]) {
        let n = T::from_usize(self.count).unwrap();
        let unbias = if self.count > 1 { n / (n - T::one()) } else { T::one() };
        for i in 0..self.mean.len() {
            running_mean[i] = (T::one() - momentum) * running_mean[i] + momentum * self.mean[i];
            running_var[i] = (T::one() - momentum) * running_var[i] + momentum * self.var[i] * unbias;
        }
    }
}

struct BatchNormBw<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    outer: usize,
    feat: usize,
    inner: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Real> Backward<T> for BatchNormBw<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let (outer, feat, inner) = (self.outer, self.feat, self.inner);
        let m = T::from_usize(outer * inner).unwrap();
        let mut sum_dy = vec![T::zero(); feat];
        let mut sum_dy_xhat = vec![T::zero(); feat];
        for o in 0..outer {
            for f in 0..feat {
                let off = (o * feat + f) * inner;
                for i in off..off + inner {
                    sum_dy[f] += ctx.grad[i];
                    sum_dy_xhat[f] += ctx.grad[i] * self.xhat[i];
                }
            }
        }
        if let Some(gg) = sink.slot(self.gamma) {
            gg.iter_mut().zip(&sum_dy_xhat).for_each(|(g, &v)| *g += v);
        }
        if let Some(gb) = sink.slot(self.beta) {
            gb.iter_mut().zip(&sum_dy).for_each(|(g, &v)| *g += v);
        }
        let gamma = ctx.value(self.gamma);
        if let Some(gx) = sink.slot(self.x) {
            for o in 0..outer {
                for f in 0..feat {
                    let scale = gamma[f] * self.inv_std[f];
                    let off = (o * feat + f) * inner;
                    for i in off..off + inner {
                        gx[i] += if self.batch_stats {
                            scale / m * (m * ctx.grad[i] - sum_dy[f] - self.xhat[i] * sum_dy_xhat[f])
                        } else {
                            scale * ctx.grad[i]
                        };
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// `gamma · (x − μ)/√(σ² + eps) + beta` per feature (axis 1).
    ///
    /// Returns the observed batch statistics when `stats` is `Batch`, so the
    /// caller can maintain running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        stats: NormStats<T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::shape("batch_norm", "input (N, F, ...)", format!("{xs:?}")));
        }
        if !(eps > T::zero()) {
            return Err(TensorError::invalid("batch_norm", "eps must be positive"));
        }
        let (outer, feat) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [feat] {
                return Err(TensorError::shape(
                    "batch_norm",
                    format!("{name} [{feat}] for input {xs:?}"),
                    format!("{:?}", self.shape(v)),
                ));
            }
        }
        let xv = self.value(x);
        let (mean, var, observed) = match stats {
            NormStats::Batch => {
                let count = outer * inner;
                let mut mean = vec![0.0f64; feat];
                let mut var = vec![0.0f64; feat];
                for o in 0..outer {
                    for f in 0..feat {
                        let off = (o * feat + f) * inner;
                        mean[f] += xv[off..off + inner].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for o in 0..outer {
                    for f in 0..feat {
                        let off = (o * feat + f) * inner;
                        var[f] += xv[off..off + inner]
                            .iter()
                            .map(|v| (v.to_f64_lossy() - mean[f]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let mean: Vec<T> = mean.into_iter().map(T::from_f64_lossy).collect();
                let var: Vec<T> = var.into_iter().map(T::from_f64_lossy).collect();
                let observed = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(observed))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != feat || var.len() != feat {
                    return Err(TensorError::shape(
                        "batch_norm",
                        format!("running stats of length {feat}"),
                        format!("{} / {}", mean.len(), var.len()),
                    ));
                }
                (mean, var, None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for f in 0..feat {
                let off = (o * feat + f) * inner;
                for i in off..off + inner {
                    xhat[i] = (xv[i] - mean[f]) * inv_std[f];
                    out[i] = gv[f] * xhat[i] + bv[f];
                }
            }
        }
        let bw = BatchNormBw {
            x,
            gamma,
            beta,
            outer,
            feat,
            inner,
            xhat,
            inv_std,
            batch_stats: observed.is_some(),
        };
        let y = self.push_op(xs, out, &[x, gamma, beta], bw);
        Ok((y, observed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn bn(values: Vec<f64>, gamma: f64, beta: f64) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let n = values.len();
        let x = g.input(&Tensor::new(&[n, 1], values).unwrap());
        let ga = g.input(&Tensor::full(&[1], gamma));
        let be = g.input(&Tensor::full(&[1], beta));
        let (y, _) = g.batch_norm(x, ga, be, 1e-5, NormStats::Batch).unwrap();
        g.value(y).to_vec()
    }

    #[test]
    fn hand_computed_standardization() {
        // (x − 2)/√(2/3 + 1e-5)
        let y = bn(vec![1.0, 2.0, 3.0], 1.0, 0.0);
        let expect = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        assert!((y[0] + expect).abs() < 1e-12 && y[1].abs() < 1e-12 && (y[2] - expect).abs() < 1e-12);
        assert!((expect - 1.22474).abs() < 1e-4);
        let y = bn(vec![1.0, 2.0, 3.0], 2.0, 1.0);
        assert!((y[0] - (1.0 - 2.0 * expect)).abs() < 1e-12);
        assert!((y[2] - 3.44949).abs() < 1e-4);
    }

    #[test]
    fn zero_variance_gives_beta() {
        let y = bn(vec![4.0; 5], 3.0, -0.7);
        assert!(y.iter().all(|&v| v == -0.7));
        assert_eq!(bn(vec![2.5], 1.0, 0.3), vec![0.3]);
    }

    #[test]
    fn channel_statistics_span_batch_and_space() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::from_fn(&[3, 2, 2, 2], |i| ((i * 37) % 11) as f64));
        let ga = g.input(&Tensor::ones(&[2]));
        let be = g.input(&Tensor::zeros(&[2]));
        let (y, stats) = g.batch_norm(x, ga, be, 1e-5, NormStats::Batch).unwrap();
        assert_eq!(stats.unwrap().count, 12);
        let v = g.value(y);
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| (0..4).map(move |i| (n * 2 + c) * 4 + i)).map(|i| v[i]).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn fixed_statistics_and_running_update() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::new(&[2, 1], vec![3.0, 5.0]).unwrap());
        let ga = g.input(&Tensor::ones(&[1]));
        let be = g.input(&Tensor::zeros(&[1]));
        let (y, none) = g
            .batch_norm(x, ga, be, 1e-5, NormStats::Fixed { mean: vec![1.0], var: vec![4.0 - 1e-5] })
            .unwrap();
        assert!(none.is_none());
        assert!((g.value(y)[0] - 1.0).abs() < 1e-12 && (g.value(y)[1] - 2.0).abs() < 1e-12);
        let (_, stats) = g.batch_norm(x, ga, be, 1e-5, NormStats::Batch).unwrap();
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        stats.unwrap().update_running(0.1, &mut rm, &mut rv);
        assert!((rm[0] - 0.4).abs() < 1e-12);
        // unbiased batch variance of {3,5} is 2
        assert!((rv[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn rejects_empty_batch_axis() {
        assert!(Tensor::<f64>::new(&[0, 2], vec![]).is_err());
    }
}
