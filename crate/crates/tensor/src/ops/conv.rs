//! 2-D cross-correlation lowered to GEMM through im2col.

use crate::error::{Result, TensorError};
use crate::graph::{Backward, BackwardCtx, GradSink, Graph, Var};
use crate::real::{gemm, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, padding: 0 }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dBw<T> {
    x: Var,
    w: Var,
    b: Option<Var>,
    geo: Geometry,
    /// im2col buffers of every sample, kept only when the kernel needs a gradient.
    cols: Option<Vec<T>>,
}

impl<T: Real> Backward<T> for Conv2dBw<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let g = &self.geo;
        let (k, p) = (g.k(), g.p());
        let in_sz = g.cin * g.h * g.w;
        let out_sz = g.cout * p;
        if let (Some(cols), Some(gw)) = (self.cols.as_ref(), sink.slot(self.w)) {
            for n in 0..g.n {
                let dy = &ctx.grad[n * out_sz..(n + 1) * out_sz];
                gemm(g.cout, p, k, dy, false, &cols[n * k * p..(n + 1) * k * p], true, T::one(), gw);
            }
        }
        if let Some(b) = self.b {
            if let Some(gb) = sink.slot(b) {
                for n in 0..g.n {
                    for (co, gbv) in gb.iter_mut().enumerate() {
                        let off = n * out_sz + co * p;
                        *gbv += ctx.grad[off..off + p].iter().copied().sum::<T>();
                    }
                }
            }
        }
        if let Some(gx) = sink.slot(self.x) {
            let wv = ctx.value(self.w);
            let mut dcols = vec![T::zero(); k * p];
            for n in 0..g.n {
                let dy = &ctx.grad[n * out_sz..(n + 1) * out_sz];
                gemm(k, g.cout, p, wv, true, dy, false, T::zero(), &mut dcols);
                col2im_add(&dcols, g, &mut gx[n * in_sz..(n + 1) * in_sz]);
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// Cross-correlation of `x` (`(N,Cin,H,W)` or `(Cin,H,W)`) with `kernel`
    /// `(Cout,Cin,kh,kw)` plus an optional per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let batched = match xs.len() {
            4 => true,
            3 => false,
            _ => return Err(TensorError::shape("conv2d", "input (N,Cin,H,W) or (Cin,H,W)", format!("{xs:?}"))),
        };
        let (n, cin, h, w) = if batched { (xs[0], xs[1], xs[2], xs[3]) } else { (1, xs[0], xs[1], xs[2]) };
        if ks.len() != 4 || ks[1] != cin {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel (Cout,{cin},kh,kw) for input {xs:?}"),
                format!("kernel {ks:?}"),
            ));
        }
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::shape("conv2d", format!("bias [{cout}]"), format!("{:?}", self.shape(b))));
            }
        }
        if spec.stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (h + 2 * spec.padding, w + 2 * spec.padding);
        if kh > ph || kw > pw {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel at most {ph}x{pw} (padded input)"),
                format!("{kh}x{kw}"),
            ));
        }
        let geo = Geometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            oh: (ph - kh) / spec.stride + 1,
            ow: (pw - kw) / spec.stride + 1,
        };
        let (k, p) = (geo.k(), geo.p());
        let keep_cols = self.needs_grad(kernel);
        let mut all_cols = if keep_cols { vec![T::zero(); n * k * p] } else { Vec::new() };
        let mut scratch = if keep_cols { Vec::new() } else { vec![T::zero(); k * p] };
        let mut out = vec![T::zero(); n * cout * p];
        let xv = self.value(x);
        let wv = self.value(kernel);
        for s in 0..n {
            let cols = if keep_cols { &mut all_cols[s * k * p..(s + 1) * k * p] } else { &mut scratch[..] };
            im2col(&xv[s * cin * h * w..(s + 1) * cin * h * w], &geo, cols);
            let y = &mut out[s * cout * p..(s + 1) * cout * p];
            if let Some(b) = bias {
                for (co, &bv) in self.value(b).iter().enumerate() {
                    y[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = bv);
                }
            }
            gemm(cout, k, p, wv, false, cols, false, T::one(), y);
        }
        let shape = if batched { vec![n, cout, geo.oh, geo.ow] } else { vec![cout, geo.oh, geo.ow] };
        let inputs: Vec<Var> = [Some(x), Some(kernel), bias].into_iter().flatten().collect();
        let bw = Conv2dBw {
            x,
            w: kernel,
            b: bias,
            geo,
            cols: keep_cols.then_some(all_cols),
        };
        Ok(self.push_op(shape, out, &inputs, bw))
    }
}
