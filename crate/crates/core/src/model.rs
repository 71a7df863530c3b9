//! The full network: backbone, global branch, reference features and the
//! three part branches, plus the training objective.

use rand::Rng;
use rapa_tensor::nn::{Ctx, Linear};
use rapa_tensor::{Graph, ParamStore, Real, Var};

use crate::backbone::Backbone;
use crate::config::{ModelConfig, TemporalAttention};
use crate::dataset::Keypoints;
use crate::error::{Error, Result};
use crate::gfe::{frame_descriptors, temporal_aggregate, Reducer};
use crate::losses::{batch_hard_triplet, softmax_ce, total_loss};
use crate::pfd::{interframe_reg, Aggregation, PartBlock};
use crate::rfl::{hard_rois, part_rois, reference_features, select_reference, QualityBlock};

pub const PART_NAMES: [&str; 3] = ["head", "body", "leg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Global,
    Part(usize),
}

impl Branch {
    pub fn name(self) -> String {
        match self {
            Branch::Global => "global".into(),
            Branch::Part(p) => format!("part{}", p + 1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rapa {
    pub cfg: ModelConfig,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    backbone: Option<Backbone>,
    quality: QualityBlock,
    temporal: Option<QualityBlock>,
    reducer: Option<Reducer>,
    parts: Vec<PartBlock>,
    classifiers: Vec<Linear>,
}

/// Per-clip inputs that accompany the frames or maps of a batch.
#[derive(Clone, Copy, Debug)]
pub struct ClipLayout<'a> {
    /// Frames per clip; clips are consecutive runs of this many frames.
    pub clip_len: usize,
    /// One entry per frame.
    pub keypoints: &'a [Keypoints],
}

/// Everything the forward pass produces for a batch of `N` clips.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// One `(N, embed_dim)` feature per active branch.
    pub branches: Vec<(Branch, Var)>,
    /// Mean inter-frame regularizer over the clips, when enabled.
    pub reg: Option<Var>,
    /// Reference frame chosen for each clip.
    pub references: Vec<usize>,
    /// Quality scores `q` per clip, `(T)` each, when computed.
    pub quality: Vec<Var>,
}

/// Loss terms of one batch.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub triplet: Vec<(Branch, Var)>,
    pub ce: Vec<(Branch, Var)>,
    pub reg: Option<Var>,
    pub total: Var,
}

impl Rapa {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, num_classes: usize, rng: &mut impl Rng) -> Self {
        let backbone = Backbone::new(store, cfg, rng);
        Self::build(store, cfg, Some(backbone), cfg.channels(), num_classes, rng)
    }

    /// Model that consumes precomputed `channels`-deep feature maps.
    pub fn head_only<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        channels: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::build(store, cfg, None, channels, num_classes, rng)
    }

    fn build<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        backbone: Option<Backbone>,
        channels: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let embed_dim = channels / cfg.reduction;
        let quality = QualityBlock::new(store, "quality", channels, rng);
        let temporal = (cfg.global_branch && cfg.temporal_attention == TemporalAttention::Independent)
            .then(|| QualityBlock::new(store, "temporal", channels, rng));
        let reducer = cfg
            .global_branch
            .then(|| Reducer::new(store, "global.reducer", channels, embed_dim, rng));
        let parts = if cfg.has_local() {
            PART_NAMES
                .iter()
                .map(|p| PartBlock::new(store, &format!("part.{p}"), channels, embed_dim, cfg.attention_norm, rng))
                .collect()
        } else {
            Vec::new()
        };
        let mut model = Rapa {
            cfg: cfg.clone(),
            channels,
            embed_dim,
            num_classes,
            backbone,
            quality,
            temporal,
            reducer,
            parts,
            classifiers: Vec::new(),
        };
        model.classifiers = model
            .branches()
            .iter()
            .map(|b| Linear::new(store, &format!("classifier.{}", b.name()), embed_dim, num_classes, 1.0, rng))
            .collect();
        model
    }

    pub fn branches(&self) -> Vec<Branch> {
        let mut out = Vec::new();
        if self.cfg.global_branch {
            out.push(Branch::Global);
        }
        if self.cfg.has_local() {
            out.extend((0..3).map(Branch::Part));
        }
        out
    }

    pub fn embedding_len(&self) -> usize {
        self.branches().len() * self.embed_dim
    }

    pub fn has_backbone(&self) -> bool {
        self.backbone.is_some()
    }

    /// Forward from raw frames `(N·T, 3, H, W)`.
    pub fn forward_frames<T: Real>(&self, ctx: &mut Ctx<'_, T>, frames: Var, layout: ClipLayout<'_>) -> Result<Outputs> {
        let backbone = self
            .backbone
            .as_ref()
            .ok_or_else(|| Error::Data("model was built without a backbone".into()))?;
        let image_h = ctx.g.shape(frames)[2];
        let maps = backbone.forward(ctx, frames)?;
        let scale = image_h as f64 / ctx.g.shape(maps)[2] as f64;
        self.forward_maps(ctx, maps, layout, scale)
    }

    /// Forward from feature maps `(N·T, C, H, W)` whose rows cover
    /// `scale_rows` image rows each.
    pub fn forward_maps<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        maps: Var,
        layout: ClipLayout<'_>,
        scale_rows: f64,
    ) -> Result<Outputs> {
        let s = ctx.g.shape(maps).to_vec();
        let t = layout.clip_len;
        if s.len() != 4 || s[1] != self.channels || t == 0 || !s[0].is_multiple_of(t) {
            return Err(Error::Data(format!(
                "feature maps {s:?} do not hold whole {t}-frame clips of {} channels",
                self.channels
            )));
        }
        if layout.keypoints.len() != s[0] {
            return Err(Error::Data(format!("{} keypoint rows for {} frames", layout.keypoints.len(), s[0])));
        }
        let (n, map_h, map_w) = (s[0] / t, s[2], s[3]);
        let cfg = &self.cfg;
        let local = cfg.has_local();
        let need_quality = cfg.global_branch || (local && cfg.quality_selection);
        let aggregation = if cfg.temporal_scores {
            Aggregation::Scores(cfg.channel_weights)
        } else {
            Aggregation::Mean
        };

        let mut global_rows = Vec::new();
        let mut fused_rows: Vec<Vec<Var>> = vec![Vec::new(); self.parts.len()];
        let mut regs = Vec::new();
        let mut references = Vec::new();
        let mut quality = Vec::new();
        for i in 0..n {
            let clip = ctx.g.narrow(maps, 0, i * t, t)?;
            let desc = frame_descriptors(&mut ctx.g, clip)?;
            let scored = if need_quality {
                let (logits, q) = self.quality.forward(ctx, desc)?;
                quality.push(q);
                Some((logits, q))
            } else {
                None
            };
            if cfg.global_branch {
                let logits = match &self.temporal {
                    Some(block) => block.forward(ctx, desc)?.0,
                    None => scored.expect("quality computed for the global branch").0,
                };
                let weights = ctx.g.softmax_last(logits)?;
                global_rows.push(temporal_aggregate(&mut ctx.g, desc, weights)?);
            }
            if !local {
                continue;
            }
            let k = match scored {
                Some((_, q)) if cfg.quality_selection => select_reference(ctx.g.value(q)),
                _ => 0,
            };
            references.push(k);
            let rois = if cfg.pose_partition {
                part_rois(&layout.keypoints[i * t + k], scale_rows, map_h, map_w)?
            } else {
                hard_rois(map_h, map_w)?
            };
            let refs = reference_features(&mut ctx.g, clip, k, rois)?;
            let mut reg_features = Vec::with_capacity(6);
            for (p, block) in self.parts.iter().enumerate() {
                let out = block.forward(ctx, clip, [refs.max[p], refs.avg[p]], aggregation)?;
                fused_rows[p].push(ctx.g.concat(&out.aggregated, 0)?);
                reg_features.extend(out.frames);
            }
            if cfg.interframe_reg {
                regs.push(interframe_reg(&mut ctx.g, &reg_features)?);
            }
        }

        let mut branches = Vec::new();
        if let Some(reducer) = &self.reducer {
            let x = ctx.g.stack(&global_rows)?;
            branches.push((Branch::Global, reducer.forward(ctx, x)?));
        }
        for (p, (block, rows)) in self.parts.iter().zip(&fused_rows).enumerate() {
            let x = ctx.g.stack(rows)?;
            branches.push((Branch::Part(p), block.fuser.forward(ctx, x)?));
        }
        let reg = if regs.is_empty() {
            None
        } else {
            let stacked = ctx.g.stack(&regs)?;
            Some(ctx.g.mean_all(stacked))
        };
        Ok(Outputs {
            branches,
            reg,
            references,
            quality,
        })
    }

    /// `[f_global, f_part1, f_part2, f_part3]` restricted to active branches,
    /// `(N, embedding_len)`.
    pub fn embedding<T: Real>(&self, g: &mut Graph<T>, out: &Outputs) -> Result<Var> {
        let feats: Vec<Var> = out.branches.iter().map(|&(_, v)| v).collect();
        if feats.len() == 1 {
            return Ok(feats[0]);
        }
        Ok(g.concat(&feats, 1)?)
    }

    /// Triplet and cross-entropy terms per branch, the regularizer and the
    /// weighted total.
    pub fn losses<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        out: &Outputs,
        labels: &[usize],
        margin: f64,
        reg_weight: f64,
    ) -> Result<LossTerms> {
        let mut triplet = Vec::new();
        let mut ce = Vec::new();
        let mut branch_losses = Vec::new();
        for (&(branch, feat), classifier) in out.branches.iter().zip(&self.classifiers) {
            let tri = batch_hard_triplet(&mut ctx.g, feat, labels, margin)?;
            let logits = classifier.forward(ctx, feat)?;
            let xent = softmax_ce(&mut ctx.g, logits, labels)?;
            branch_losses.push(ctx.g.add(tri, xent)?);
            triplet.push((branch, tri));
            ce.push((branch, xent));
        }
        let reg = if self.cfg.interframe_reg { out.reg } else { None };
        let total = total_loss(&mut ctx.g, &branch_losses, reg, reg_weight)?;
        Ok(LossTerms { triplet, ce, reg, total })
    }
}
