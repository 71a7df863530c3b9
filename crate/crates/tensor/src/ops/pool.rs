//! Global and region-of-interest pooling over the trailing spatial axes.

use crate::error::{Result, TensorError};
use crate::graph::{Backward, BackwardCtx, GradSink, Graph, Var};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Half-open rectangle `[top, bottom) × [left, right)` in map cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Roi {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Roi {
    pub fn full(h: usize, w: usize) -> Self {
        Roi {
            top: 0,
            bottom: h,
            left: 0,
            right: w,
        }
    }

    pub fn height(&self) -> usize {
        self.bottom.saturating_sub(self.top)
    }

    pub fn width(&self) -> usize {
        self.right.saturating_sub(self.left)
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }
}

struct PoolBw {
    x: Var,
    mode: PoolMode,
    /// Flat input index of each pooled cell, per output (all cells for avg).
    cells: Vec<usize>,
    /// For max pooling: chosen flat input index per output.
    argmax: Vec<usize>,
    h: usize,
    w: usize,
}

impl<T: Real> Backward<T> for PoolBw {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let Some(gx) = sink.slot(self.x) else { return };
        match self.mode {
            PoolMode::Max => {
                for (&idx, &d) in self.argmax.iter().zip(ctx.grad) {
                    gx[idx] += d;
                }
            }
            PoolMode::Avg => {
                let count = T::from_usize(self.cells.len()).unwrap();
                let plane = self.h * self.w;
                for (o, &d) in ctx.grad.iter().enumerate() {
                    let share = d / count;
                    for &c in &self.cells {
                        gx[o * plane + c] += share;
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// Per-channel spatial mean or maximum: `(…, C, H, W) → (…, C)`.
    pub fn pool_global(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 3 {
            return Err(TensorError::shape("pool_global", "input (…, C, H, W)", format!("{s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        self.pool_region(x, Roi::full(h, w), mode, "pool_global")
    }

    /// Per-channel pooling restricted to `roi`: `(…, C, H, W) → (…, C)`.
    pub fn roi_pool(&mut self, x: Var, roi: Roi, mode: PoolMode) -> Result<Var> {
        self.pool_region(x, roi, mode, "roi_pool")
    }

    fn pool_region(&mut self, x: Var, roi: Roi, mode: PoolMode, op: &'static str) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(TensorError::shape(op, "input (…, C, H, W)", format!("{shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if roi.height() == 0 || roi.width() == 0 || roi.bottom > h || roi.right > w {
            return Err(TensorError::invalid(op, format!("region {roi:?} invalid for a {h}x{w} map")));
        }
        let cells: Vec<usize> = (roi.top..roi.bottom)
            .flat_map(|r| (roi.left..roi.right).map(move |c| r * w + c))
            .collect();
        let plane = h * w;
        let xv = self.value(x);
        let outputs = xv.len() / plane;
        let mut out = Vec::with_capacity(outputs);
        let mut argmax = Vec::new();
        for o in 0..outputs {
            let base = o * plane;
            match mode {
                PoolMode::Avg => {
                    let s: T = cells.iter().map(|&c| xv[base + c]).sum();
                    out.push(s / T::from_usize(cells.len()).unwrap());
                }
                PoolMode::Max => {
                    let mut best = cells[0];
                    for &c in &cells[1..] {
                        if xv[base + c] > xv[base + best] {
                            best = c;
                        }
                    }
                    out.push(xv[base + best]);
                    argmax.push(base + best);
                }
            }
        }
        let out_shape = shape[..shape.len() - 2].to_vec();
        let bw = PoolBw {
            x,
            mode,
            cells: if mode == PoolMode::Avg { cells } else { Vec::new() },
            argmax,
            h,
            w,
        };
        Ok(self.push_op(out_shape, out, &[x], bw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn global_pool_definitions() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::new(&[1, 1, 3], vec![1.0, 5.0, 2.0]).unwrap());
        let m = g.pool_global(x, PoolMode::Max).unwrap();
        assert_eq!(g.value(m), &[5.0]);
        let y = g.input(&Tensor::new(&[1, 2, 2], vec![1.0, 5.0, 2.0, 4.0]).unwrap());
        let a = g.pool_global(y, PoolMode::Avg).unwrap();
        assert_eq!(g.value(a), &[3.0]);
    }

    #[test]
    fn roi_cases() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_fn(&[2, 3, 4], |i| ((i * 13) % 7) as f64);
        let x = g.input(&t);
        for mode in [PoolMode::Avg, PoolMode::Max] {
            let full = g.roi_pool(x, Roi::full(3, 4), mode).unwrap();
            let glob = g.pool_global(x, mode).unwrap();
            assert_eq!(g.value(full), g.value(glob));
        }
        let cell = Roi { top: 1, bottom: 2, left: 2, right: 3 };
        let one = g.roi_pool(x, cell, PoolMode::Avg).unwrap();
        assert_eq!(g.value(one), &[t.data()[6], t.data()[12 + 6]]);
        let y = g.input(&Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let a = g.roi_pool(y, Roi::full(2, 2), PoolMode::Avg).unwrap();
        assert_eq!(g.value(a), &[2.5]);
    }

    #[test]
    fn rejects_degenerate_and_out_of_bounds() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::zeros(&[1, 3, 4]));
        assert!(g.roi_pool(x, Roi { top: 1, bottom: 1, left: 0, right: 4 }, PoolMode::Max).is_err());
        assert!(g.roi_pool(x, Roi { top: 0, bottom: 4, left: 0, right: 4 }, PoolMode::Max).is_err());
        let flat = g.input(&Tensor::zeros(&[3, 4]));
        assert!(g.pool_global(flat, PoolMode::Avg).is_err());
    }
}
