use super::split_axis;
use crate::error::{Result, TensorError};
use crate::graph::{Backward, BackwardCtx, GradSink, Graph, Var};
use crate::real::Real;
use crate::tensor::shape_numel;

struct ReshapeBw {
    x: Var,
}

impl<T: Real> Backward<T> for ReshapeBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        if let Some(gx) = sink.slot(self.x) {
            gx.iter_mut().zip(ctx.grad).for_each(|(g, &d)| *g += d);
        }
    }
}

struct ConcatBw {
    parts: Vec<(Var, usize)>,
    outer: usize,
    inner: usize,
    total: usize,
}

impl<T: Real> Backward<T> for ConcatBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let mut offset = 0;
        for &(v, len) in &self.parts {
            if let Some(gv) = sink.slot(v) {
                let chunk = len * self.inner;
                for o in 0..self.outer {
                    let src = &ctx.grad[(o * self.total + offset) * self.inner..][..chunk];
                    gv[o * chunk..(o + 1) * chunk]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(g, &d)| *g += d);
                }
            }
            offset += len;
        }
    }
}

struct NarrowBw {
    x: Var,
    outer: usize,
    axis_len: usize,
    inner: usize,
    start: usize,
    len: usize,
}

impl<T: Real> Backward<T> for NarrowBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let Some(gx) = sink.slot(self.x) else { return };
        let chunk = self.len * self.inner;
        for o in 0..self.outer {
            let dst = &mut gx[(o * self.axis_len + self.start) * self.inner..][..chunk];
            dst.iter_mut()
                .zip(&ctx.grad[o * chunk..(o + 1) * chunk])
                .for_each(|(g, &d)| *g += d);
        }
    }
}

struct TransposeBw {
    x: Var,
    rows: usize,
    cols: usize,
}

impl<T: Real> Backward<T> for TransposeBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let Some(gx) = sink.slot(self.x) else { return };
        for i in 0..self.rows {
            for j in 0..self.cols {
                gx[i * self.cols + j] += ctx.grad[j * self.rows + i];
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::shape("transpose", "(rows, cols)", format!("{s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            out.extend((0..rows).map(|i| xv[i * cols + j]));
        }
        Ok(self.push_op(vec![cols, rows], out, &[x], TransposeBw { x, rows, cols }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape_numel(shape) != self.numel(x) || shape.contains(&0) {
            return Err(TensorError::shape("reshape", format!("{:?}", self.shape(x)), format!("{shape:?}")));
        }
        let v = self.value(x).to_vec();
        Ok(self.push_op(shape.to_vec(), v, &[x], ReshapeBw { x }))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut parts = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", format!("{base:?} off axis {axis}"), format!("{s:?}")));
            }
            parts.push((v, s[axis]));
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(v, len) in &parts {
                out.extend_from_slice(&self.value(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push_op(shape, out, xs, ConcatBw { parts, outer, inner, total }))
    }

    /// Stacks equally shaped nodes along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| TensorError::invalid("stack", "no inputs"))?;
        let mut shape = vec![1];
        shape.extend_from_slice(self.shape(*first));
        let lifted = xs
            .iter()
            .map(|&v| self.reshape(v, &shape))
            .collect::<Result<Vec<_>>>()?;
        self.concat(&lifted, 0)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "narrow",
                format!("[{start}, {}) along axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let chunk = len * inner;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * axis_len + start) * inner..][..chunk]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let bw = NarrowBw {
            x,
            outer,
            axis_len,
            inner,
            start,
            len,
        };
        Ok(self.push_op(out_shape, out, &[x], bw))
    }

    /// The `index`-th slice along the leading axis, with that axis removed.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::shape("select", "at least 2-D input", format!("{shape:?}")));
        }
        let row = self.narrow(x, 0, index, 1)?;
        self.reshape(row, &shape[1..])
    }
}
