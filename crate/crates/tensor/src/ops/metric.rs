//! Distance-style operations used by relation maps and metric losses.

use crate::error::{Result, TensorError};
use crate::graph::{Backward, BackwardCtx, GradSink, Graph, Var};
use crate::real::Real;

struct SqDiffBw {
    x: Var,
    r: Var,
    channels: usize,
    plane: usize,
}

impl<T: Real> Backward<T> for SqDiffBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let (xv, rv) = (ctx.value(self.x), ctx.value(self.r));
        let two = T::one() + T::one();
        if let Some(gx) = sink.slot(self.x) {
            for (i, g) in gx.iter_mut().enumerate() {
                let c = (i / self.plane) % self.channels;
                *g += two * (xv[i] - rv[c]) * ctx.grad[i];
            }
        }
        if let Some(gr) = sink.slot(self.r) {
            for (i, &d) in ctx.grad.iter().enumerate() {
                let c = (i / self.plane) % self.channels;
                gr[c] -= two * (xv[i] - rv[c]) * d;
            }
        }
    }
}

struct PairwiseBw {
    x: Var,
    n: usize,
    d: usize,
    squared: bool,
}

impl<T: Real> Backward<T> for PairwiseBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let Some(gx) = sink.slot(self.x) else { return };
        let xv = ctx.value(self.x);
        let (n, d) = (self.n, self.d);
        let two = T::one() + T::one();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let up = ctx.grad[i * n + j];
                if up == T::zero() {
                    continue;
                }
                // ∂‖xi−xj‖²/∂xi = 2(xi−xj); ∂‖xi−xj‖/∂xi = (xi−xj)/‖xi−xj‖
                let coef = if self.squared {
                    two * up
                } else {
                    let dist = ctx.out[i * n + j];
                    if dist == T::zero() {
                        continue;
                    }
                    up / dist
                };
                for k in 0..d {
                    let diff = coef * (xv[i * d + k] - xv[j * d + k]);
                    gx[i * d + k] += diff;
                    gx[j * d + k] -= diff;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowReduce {
    Max,
    Min,
}

struct PickBw {
    x: Var,
    picked: Vec<usize>,
}

impl<T: Real> Backward<T> for PickBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        if let Some(gx) = sink.slot(self.x) {
            for (&idx, &d) in self.picked.iter().zip(ctx.grad) {
                gx[idx] += d;
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// `(x[…, c, h, w] − r[c])²` for `x` of shape `(…, C, H, W)` and `r` of
    /// shape `(C)`.
    pub fn sq_diff_channel(&mut self, x: Var, r: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(TensorError::shape("sq_diff_channel", "input (…, C, H, W)", format!("{shape:?}")));
        }
        let channels = shape[shape.len() - 3];
        if self.shape(r) != [channels] {
            return Err(TensorError::shape(
                "sq_diff_channel",
                format!("reference [{channels}]"),
                format!("{:?}", self.shape(r)),
            ));
        }
        let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
        let (xv, rv) = (self.value(x), self.value(r));
        let out = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let diff = v - rv[(i / plane) % channels];
                diff * diff
            })
            .collect();
        Ok(self.push_op(shape, out, &[x, r], SqDiffBw { x, r, channels, plane }))
    }

    /// Row-to-row Euclidean distances of `x` `(n, d)`, plain or squared.
    /// The diagonal is exactly zero and contributes no gradient.
    pub fn pairwise_dist(&mut self, x: Var, squared: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::shape("pairwise_dist", "(n, d)", format!("{s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let sq: T = (0..d).map(|k| (xv[i * d + k] - xv[j * d + k]).powi(2)).sum();
                out[i * n + j] = if squared { sq } else { sq.sqrt() };
            }
        }
        Ok(self.push_op(vec![n, n], out, &[x], PairwiseBw { x, n, d, squared }))
    }

    /// Per-row maximum or minimum of `x` `(n, m)` over the entries where
    /// `mask[i*m + j]` holds; ties resolve to the lowest column.
    pub fn masked_reduce_rows(&mut self, x: Var, mask: &[bool], how: RowReduce) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || mask.len() != s[0] * s[1] {
            return Err(TensorError::shape("masked_reduce_rows", format!("(n, m) with {} mask entries", mask.len()), format!("{s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let xv = self.value(x);
        let mut picked = Vec::with_capacity(n);
        for i in 0..n {
            let mut best: Option<usize> = None;
            for j in 0..m {
                let idx = i * m + j;
                if !mask[idx] {
                    continue;
                }
                best = match best {
                    None => Some(idx),
                    Some(b) => {
                        let better = match how {
                            RowReduce::Max => xv[idx] > xv[b],
                            RowReduce::Min => xv[idx] < xv[b],
                        };
                        Some(if better { idx } else { b })
                    }
                };
            }
            picked.push(best.ok_or_else(|| {
                TensorError::invalid("masked_reduce_rows", format!("row {i} has no selectable entry"))
            })?);
        }
        let out = picked.iter().map(|&i| xv[i]).collect();
        Ok(self.push_op(vec![n], out, &[x], PickBw { x, picked }))
    }

    /// `out[i] = x[i, cols[i]]` for `x` of shape `(n, m)`.
    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || cols.len() != s[0] {
            return Err(TensorError::shape("gather_cols", format!("({}, m)", cols.len()), format!("{s:?}")));
        }
        let m = s[1];
        if let Some(&bad) = cols.iter().find(|&&c| c >= m) {
            return Err(TensorError::invalid("gather_cols", format!("column {bad} out of range for {m} columns")));
        }
        let picked: Vec<usize> = cols.iter().enumerate().map(|(i, &c)| i * m + c).collect();
        let out = picked.iter().map(|&i| self.value(x)[i]).collect();
        Ok(self.push_op(vec![cols.len()], out, &[x], PickBw { x, picked }))
    }
}
