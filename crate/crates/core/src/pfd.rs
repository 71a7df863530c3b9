//! Part features from relation attention.
//!
//! For one part and one reference vector `r`, every feature-map cell is
//! compared with `r` by squared difference; a per-channel batch norm and
//! `1 − σ(·)` turn the differences into an attention map that is high where
//! the cell resembles the reference. Masked max pooling gives one feature per
//! frame, the mean attention per channel weights the frames, and the weighted
//! frame features are summed over time.

use rand::Rng;
use rapa_tensor::nn::{BatchNorm, Ctx};
use rapa_tensor::{Graph, ParamStore, PoolMode, Real, Var};

use crate::config::{AttentionNorm, ChannelWeights};
use crate::error::Result;
use crate::gfe::Reducer;

/// `d[t,c,h,w] = (maps[t,c,h,w] − r[c])²`.
pub fn relation_map<T: Real>(g: &mut Graph<T>, maps: Var, r: Var) -> Result<Var> {
    Ok(g.sq_diff_channel(maps, r)?)
}

/// `A = 1 − σ(BN(D))`, normalizing each channel over all frames and cells.
pub fn attention_map<T: Real>(ctx: &mut Ctx<'_, T>, d: Var, norm: &BatchNorm) -> Result<Var> {
    let y = norm.forward(ctx, d)?;
    let s = ctx.g.sigmoid(y);
    Ok(ctx.g.affine(s, -T::one(), T::one()))
}

/// `f_t = GMP(F_t ⊙ A_t)`, `(T, C)`.
pub fn frame_part_feature<T: Real>(g: &mut Graph<T>, maps: Var, attention: Var) -> Result<Var> {
    let masked = g.mul(maps, attention)?;
    Ok(g.pool_global(masked, PoolMode::Max)?)
}

/// `S_t[c]` = spatial mean of the attention, `(T, C)`.
pub fn temporal_channel_scores<T: Real>(g: &mut Graph<T>, attention: Var) -> Result<Var> {
    Ok(g.pool_global(attention, PoolMode::Avg)?)
}

/// `Σ_t f_t ⊙ S_t`, `(C)`.
pub fn aggregate_part_feature<T: Real>(g: &mut Graph<T>, frames: Var, scores: Var) -> Result<Var> {
    let weighted = g.mul(frames, scores)?;
    Ok(g.sum_axis(weighted, 0)?)
}

/// `Σ_{i≠j} ‖f_i − f_j‖²` summed over the given `(T, C)` feature sets.
pub fn interframe_reg<T: Real>(g: &mut Graph<T>, features: &[Var]) -> Result<Var> {
    let mut total = None;
    for &f in features {
        let d = g.pairwise_dist(f, true)?;
        let s = g.sum_all(d);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(&[], vec![T::zero()]).expect("scalar")))
}

/// How the per-frame part features become one clip feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Weighted by the attention channel scores.
    Scores(ChannelWeights),
    /// Plain temporal mean.
    Mean,
}

/// Output of one part for one clip.
#[derive(Clone, Debug)]
pub struct PartOutput {
    /// Aggregated max-reference and avg-reference features, each `(C)`.
    pub aggregated: [Var; 2],
    /// Per-frame features `(T, C)` for both references.
    pub frames: [Var; 2],
}

/// Attention norms (max and avg reference) and the fuser for one part.
#[derive(Clone, Debug)]
pub struct PartBlock {
    norms: [BatchNorm; 2],
    pub fuser: Reducer,
}

impl PartBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        out: usize,
        norm: AttentionNorm,
        rng: &mut impl Rng,
    ) -> Self {
        let running = norm == AttentionNorm::Running;
        PartBlock {
            norms: [
                BatchNorm::new(store, &format!("{name}.attn_max"), channels, running),
                BatchNorm::new(store, &format!("{name}.attn_avg"), channels, running),
            ],
            fuser: Reducer::new(store, &format!("{name}.fuser"), 2 * channels, out, rng),
        }
    }

    /// Runs the part against references `[r^m, r^a]` on clip maps `(T, C, H, W)`.
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        maps: Var,
        refs: [Var; 2],
        aggregation: Aggregation,
    ) -> Result<PartOutput> {
        let mut aggregated = Vec::with_capacity(2);
        let mut frames = Vec::with_capacity(2);
        for (r, norm) in refs.into_iter().zip(&self.norms) {
            let d = relation_map(&mut ctx.g, maps, r)?;
            let a = attention_map(ctx, d, norm)?;
            let f = frame_part_feature(&mut ctx.g, maps, a)?;
            let agg = match aggregation {
                Aggregation::Mean => ctx.g.mean_axis(f, 0)?,
                Aggregation::Scores(weights) => {
                    let mut s = temporal_channel_scores(&mut ctx.g, a)?;
                    if weights == ChannelWeights::Softmax {
                        let st = ctx.g.transpose(s)?;
                        let st = ctx.g.softmax_last(st)?;
                        s = ctx.g.transpose(st)?;
                    }
                    aggregate_part_feature(&mut ctx.g, f, s)?
                }
            };
            aggregated.push(agg);
            frames.push(f);
        }
        Ok(PartOutput {
            aggregated: aggregated.try_into().expect("two references"),
            frames: frames.try_into().expect("two references"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rapa_tensor::Tensor;

    #[test]
    fn reg_hand_value() {
        let mut g = Graph::<f64>::new();
        let fm = g.input(&Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let fa = g.input(&Tensor::zeros(&[2, 2]));
        let reg = interframe_reg(&mut g, &[fm, fa]).unwrap();
        assert_eq!(g.item(reg), 4.0);
        let single = g.input(&Tensor::ones(&[1, 3]));
        let r1 = interframe_reg(&mut g, &[single]).unwrap();
        assert_eq!(g.item(r1), 0.0);
    }

    #[test]
    fn aggregation_cases() {
        let mut g = Graph::<f64>::new();
        let f = g.input(&Tensor::new(&[2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let s = g.input(&Tensor::new(&[2, 2], vec![0.5, 0.25, 0.5, 0.25]).unwrap());
        let out = aggregate_part_feature(&mut g, f, s).unwrap();
        assert_eq!(g.value(out), &[1.0, 1.0]);
        let zero = g.input(&Tensor::zeros(&[2, 2]));
        let z = aggregate_part_feature(&mut g, f, zero).unwrap();
        assert_eq!(g.value(z), &[0.0, 0.0]);
    }
}
