//! Differentiable operations, each recorded on a [`Graph`](crate::Graph)
//! together with its vector-Jacobian product.

pub mod conv;
mod elementwise;
mod linalg;
pub mod metric;
pub mod norm;
pub mod pool;
mod reduce;
mod shape;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::real::Real;

impl<T: Real> Graph<T> {
    pub(crate) fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        Ok(())
    }
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
