use super::split_axis;
use crate::error::{Result, TensorError};
use crate::graph::{Backward, BackwardCtx, GradSink, Graph, Var};
use crate::real::Real;

struct SumAllBw<T> {
    x: Var,
    scale: T,
}

impl<T: Real> Backward<T> for SumAllBw<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let d = ctx.grad[0] * self.scale;
        if let Some(gx) = sink.slot(self.x) {
            gx.iter_mut().for_each(|g| *g += d);
        }
    }
}

struct SumAxisBw<T> {
    x: Var,
    outer: usize,
    len: usize,
    inner: usize,
    scale: T,
}

impl<T: Real> Backward<T> for SumAxisBw<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let Some(gx) = sink.slot(self.x) else { return };
        for o in 0..self.outer {
            let d = &ctx.grad[o * self.inner..(o + 1) * self.inner];
            for l in 0..self.len {
                let dst = &mut gx[(o * self.len + l) * self.inner..][..self.inner];
                dst.iter_mut().zip(d).for_each(|(g, &v)| *g += v * self.scale);
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().sum();
        self.push_op(vec![1], vec![s], &[x], SumAllBw { x, scale: T::one() })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.numel(x)).unwrap();
        let s: T = self.value(x).iter().copied().sum();
        self.push_op(vec![1], vec![s / n], &[x], SumAllBw { x, scale: T::one() / n })
    }

    /// Sum along `axis`, removing it (a 1-D input reduces to shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let scale = if mean { T::one() / T::from_usize(len).unwrap() } else { T::one() };
        let xv = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..][..inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, &v)| *a += v);
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let bw = SumAxisBw {
            x,
            outer,
            len,
            inner,
            scale,
        };
        Ok(self.push_op(out_shape, out, &[x], bw))
    }
}
