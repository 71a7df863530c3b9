//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a [`Tensor`] is a shape plus a
//! row-major buffer, a [`Graph`] records operations as they are evaluated and
//! replays them backwards, and [`ParamStore`] owns the trainable leaves that
//! optimizers such as [`Adam`] update in place.
//!
//! Everything is generic over [`Real`], implemented for `f32` (training) and
//! `f64` (gradient checking).

mod adam;
mod error;
mod graph;
mod gradcheck;
pub mod io;
pub mod nn;
mod ops;
mod params;
mod real;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, WorstEntry};
pub use graph::{Gradients, Graph, Var};
pub use ops::conv::Conv2dSpec;
pub use ops::metric::RowReduce;
pub use ops::norm::{BatchStats, NormStats};
pub use ops::pool::{PoolMode, Roi};
pub use params::{ParamId, ParamStore};
pub use real::{DType, Real};
pub use tensor::Tensor;
