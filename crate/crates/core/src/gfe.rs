//! Global branch: per-frame average pooling, attention-weighted temporal
//! fusion and dimension reduction.

use rand::Rng;
use rapa_tensor::nn::{BatchNorm, Ctx, Linear};
use rapa_tensor::{Graph, ParamStore, PoolMode, Real, Var};

use crate::backbone::RELU_GAIN;
use crate::error::{Error, Result};

/// `(T, C, H, W)` maps to `(T, C)` spatial means.
pub fn frame_descriptors<T: Real>(g: &mut Graph<T>, maps: Var) -> Result<Var> {
    Ok(g.pool_global(maps, PoolMode::Avg)?)
}

/// `Σ_t w_t · l_t` for descriptors `(T, C)` and weights `(T)`.
pub fn temporal_aggregate<T: Real>(g: &mut Graph<T>, descriptors: Var, weights: Var) -> Result<Var> {
    let s = g.shape(descriptors).to_vec();
    if s.len() != 2 || g.shape(weights) != [s[0]] {
        return Err(Error::Data(format!(
            "temporal weights {:?} do not match descriptors {s:?}",
            g.shape(weights)
        )));
    }
    let w = g.reshape(weights, &[1, s[0]])?;
    let out = g.matmul(w, descriptors)?;
    Ok(g.reshape(out, &[s[1]])?)
}

/// `relu(BN(linear(x)))` over a batch of rows; used for the global reducer
/// and the part fusers.
#[derive(Clone, Debug)]
pub struct Reducer {
    linear: Linear,
    norm: BatchNorm,
}

impl Reducer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Reducer {
            linear: Linear::new_unbiased(store, &format!("{name}.linear"), din, dout, RELU_GAIN, rng),
            norm: BatchNorm::new(store, &format!("{name}.bn"), dout, true),
        }
    }

    /// `(N, din)` to `(N, dout)`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.linear.forward(ctx, x)?;
        let y = self.norm.forward(ctx, y)?;
        Ok(ctx.g.relu(y))
    }
}
