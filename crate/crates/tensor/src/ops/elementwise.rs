use crate::error::{Result, TensorError};
use crate::graph::{Backward, BackwardCtx, GradSink, Graph, Var};
use crate::real::Real;

struct AddBw {
    a: Var,
    b: Var,
    sign_b: f64,
}

impl<T: Real> Backward<T> for AddBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        if let Some(ga) = sink.slot(self.a) {
            ga.iter_mut().zip(ctx.grad).for_each(|(g, &d)| *g += d);
        }
        let s = T::from_f64_lossy(self.sign_b);
        if let Some(gb) = sink.slot(self.b) {
            gb.iter_mut().zip(ctx.grad).for_each(|(g, &d)| *g += s * d);
        }
    }
}

struct MulBw {
    a: Var,
    b: Var,
}

impl<T: Real> Backward<T> for MulBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let (va, vb) = (ctx.value(self.a), ctx.value(self.b));
        if let Some(ga) = sink.slot(self.a) {
            for ((g, &d), &y) in ga.iter_mut().zip(ctx.grad).zip(vb) {
                *g += d * y;
            }
        }
        if let Some(gb) = sink.slot(self.b) {
            for ((g, &d), &x) in gb.iter_mut().zip(ctx.grad).zip(va) {
                *g += d * x;
            }
        }
    }
}

struct ScaleBw<T> {
    a: Var,
    s: T,
}

impl<T: Real> Backward<T> for ScaleBw<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        if let Some(ga) = sink.slot(self.a) {
            ga.iter_mut().zip(ctx.grad).for_each(|(g, &d)| *g += self.s * d);
        }
    }
}

struct SigmoidBw {
    a: Var,
}

impl<T: Real> Backward<T> for SigmoidBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        if let Some(ga) = sink.slot(self.a) {
            for ((g, &d), &y) in ga.iter_mut().zip(ctx.grad).zip(ctx.out) {
                *g += d * y * (T::one() - y);
            }
        }
    }
}

struct ReluBw {
    a: Var,
}

impl<T: Real> Backward<T> for ReluBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        if let Some(ga) = sink.slot(self.a) {
            for ((g, &d), &y) in ga.iter_mut().zip(ctx.grad).zip(ctx.out) {
                if y > T::zero() {
                    *g += d;
                }
            }
        }
    }
}

struct SoftmaxBw {
    a: Var,
    cols: usize,
    log: bool,
}

impl<T: Real> Backward<T> for SoftmaxBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let Some(ga) = sink.slot(self.a) else { return };
        for ((g, d), y) in ga
            .chunks_exact_mut(self.cols)
            .zip(ctx.grad.chunks_exact(self.cols))
            .zip(ctx.out.chunks_exact(self.cols))
        {
            if self.log {
                // y = x - logsumexp(x)
                let total: T = d.iter().copied().sum();
                for i in 0..self.cols {
                    g[i] += d[i] - y[i].exp() * total;
                }
            } else {
                let dot: T = d.iter().zip(y).map(|(&a, &b)| a * b).sum();
                for i in 0..self.cols {
                    g[i] += y[i] * (d[i] - dot);
                }
            }
        }
    }
}

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push_op(self.shape(a).to_vec(), v, &[a, b], AddBw { a, b, sign_b: 1.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push_op(self.shape(a).to_vec(), v, &[a, b], AddBw { a, b, sign_b: -1.0 }))
    }

    /// Hadamard product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push_op(self.shape(a).to_vec(), v, &[a, b], MulBw { a, b }))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let v = self.value(a).iter().map(|&x| scale * x + shift).collect();
        self.push_op(self.shape(a).to_vec(), v, &[a], ScaleBw { a, s: scale })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.affine(a, T::one(), c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| sigmoid_scalar(x)).collect();
        self.push_op(self.shape(a).to_vec(), v, &[a], SigmoidBw { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        self.push_op(self.shape(a).to_vec(), v, &[a], ReluBw { a })
    }

    /// Softmax over the last dimension.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax_last(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, log: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let mut out = Vec::with_capacity(self.numel(a));
        for row in self.value(a).chunks_exact(cols) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&x| (x - m).exp()).sum();
            if log {
                let lse = m + sum.ln();
                out.extend(row.iter().map(|&x| x - lse));
            } else {
                out.extend(row.iter().map(|&x| (x - m).exp() / sum));
            }
        }
        Ok(self.push_op(shape, out, &[a], SoftmaxBw { a, cols, log }))
    }
}
