use crate::error::{Result, TensorError};
use crate::graph::{Backward, BackwardCtx, GradSink, Graph, Var};
use crate::real::{gemm, Real};

struct LinearBw {
    x: Var,
    w: Var,
    b: Option<Var>,
    rows: usize,
    din: usize,
    dout: usize,
}

impl<T: Real> Backward<T> for LinearBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let (rows, din, dout) = (self.rows, self.din, self.dout);
        if let Some(gx) = sink.slot(self.x) {
            // dX = dY · W
            gemm(rows, dout, din, ctx.grad, false, ctx.value(self.w), false, T::one(), gx);
        }
        if let Some(gw) = sink.slot(self.w) {
            // dW = dYᵀ · X
            gemm(dout, rows, din, ctx.grad, true, ctx.value(self.x), false, T::one(), gw);
        }
        if let Some(b) = self.b {
            if let Some(gb) = sink.slot(b) {
                for row in ctx.grad.chunks_exact(dout) {
                    gb.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                }
            }
        }
    }
}

struct MatmulBw {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Real> Backward<T> for MatmulBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(ga) = sink.slot(self.a) {
            gemm(m, n, k, ctx.grad, false, ctx.value(self.b), true, T::one(), ga);
        }
        if let Some(gb) = sink.slot(self.b) {
            gemm(k, m, n, ctx.value(self.a), true, ctx.grad, false, T::one(), gb);
        }
    }
}

impl<T: Real> Graph<T> {
    /// Affine map along the last dimension: `x · wᵀ + b` with `w` of shape
    /// `(dout, din)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(TensorError::shape("linear", "2-D weight (dout, din)", format!("{ws:?}")));
        }
        let (dout, din) = (ws[0], ws[1]);
        if xs.last() != Some(&din) {
            return Err(TensorError::shape(
                "linear",
                format!("input trailing dim {din}"),
                format!("input shape {xs:?}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(TensorError::shape("linear", format!("bias [{dout}]"), format!("{:?}", self.shape(b))));
            }
        }
        let rows = self.numel(x) / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(self.value(b));
            }
        }
        gemm(rows, din, dout, self.value(x), false, self.value(w), true, T::one(), &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_op(shape, out, &inputs, LinearBw { x, w, b, rows, din, dout }))
    }

    /// Matrix product of `(m, k)` and `(k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", "(m,k)·(k,n)", format!("{sa:?}·{sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, T::zero(), &mut out);
        Ok(self.push_op(vec![m, n], out, &[a, b], MatmulBw { a, b, m, k, n }))
    }
}
