//! Run configuration.
//!
//! A config file is TOML with one section per subsystem. Every key has a
//! default; keys the program does not know are rejected, all of them at once.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct Config {
    pub seed: u64,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
    pub ablate: AblateConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub cameras: usize,
    pub clips_per_identity_per_cam: usize,
    pub frames_per_clip: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Maximum per-frame vertical offset of the person, as a fraction of the
    /// image height.
    pub vertical_shift_range: f64,
    pub occlusion_probability: f64,
    pub noise_std: f64,
    /// Minimum distance between the colors of two palette entries.
    pub min_separation: f64,
    pub palette_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalAttention {
    /// Global-branch frame weights are the softmax of the quality logits.
    Shared,
    /// The global branch owns a second scoring block.
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelWeights {
    /// Spatial mean of the attention map, used as is.
    Literal,
    /// Spatial mean of the attention map, softmax-normalised over frames.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionNorm {
    /// Relation maps are normalised with the statistics of their own clip.
    Clip,
    /// Running statistics are tracked in training and used in evaluation.
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub stages: Vec<usize>,
    pub strides: Vec<usize>,
    pub reduction: usize,
    pub global_branch: bool,
    pub local_branches: bool,
    /// Relation attention against reference part features. Without it the
    /// local branches are absent.
    pub relation_attention: bool,
    pub interframe_reg: bool,
    pub temporal_scores: bool,
    pub pose_partition: bool,
    pub quality_selection: bool,
    pub temporal_attention: TemporalAttention,
    pub channel_weights: ChannelWeights,
    pub attention_norm: AttentionNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Frames sampled per clip (T).
    pub clip_len: usize,
    /// Identities per batch (P).
    pub ids_per_batch: usize,
    /// Clips per identity in a batch (K).
    pub clips_per_id: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub margin: f64,
    pub reg_weight: f64,
    /// Epoch interval between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub random_erasing: f64,
    pub random_crop: bool,
    pub crop_padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Remainder {
    Pad,
    Drop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub clip_len: usize,
    pub remainder: Remainder,
    pub ranks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Tenfold step reductions tried for an entry that disagrees.
    pub refinements: usize,
    /// Scales every analytic gradient by 1.01 to prove the check can fail.
    pub inject_bug: bool,
    pub ids: usize,
    pub clips_per_id: usize,
    pub clip_len: usize,
    pub channels: usize,
    pub map_height: usize,
    pub map_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
}


impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_identities: 32,
            cameras: 2,
            clips_per_identity_per_cam: 2,
            frames_per_clip: 8,
            image_height: 256,
            image_width: 128,
            vertical_shift_range: 0.25,
            occlusion_probability: 0.3,
            noise_std: 0.05,
            min_separation: 0.35,
            palette_size: 6,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: vec![16, 32, 64],
            strides: vec![2, 2, 2],
            reduction: 4,
            global_branch: true,
            local_branches: true,
            relation_attention: true,
            interframe_reg: true,
            temporal_scores: true,
            pose_partition: true,
            quality_selection: true,
            temporal_attention: TemporalAttention::Shared,
            channel_weights: ChannelWeights::Literal,
            attention_norm: AttentionNorm::Clip,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clip_len: 4,
            ids_per_batch: 4,
            clips_per_id: 2,
            epochs: 60,
            lr: 3.5e-3,
            lr_decay: 0.1,
            lr_decay_every: 20,
            weight_decay: 5e-4,
            decoupled_weight_decay: false,
            margin: 0.3,
            reg_weight: 3e-4,
            checkpoint_every: 20,
            random_erasing: 0.5,
            random_crop: true,
            crop_padding: 8,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            clip_len: 4,
            remainder: Remainder::Pad,
            ranks: vec![1, 5, 20],
        }
    }
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            refinements: 2,
            inject_bug: false,
            ids: 2,
            clips_per_id: 2,
            clip_len: 2,
            channels: 8,
            map_height: 8,
            map_width: 4,
        }
    }
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { seeds: vec![0, 1, 2] }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.stages.last().copied().unwrap_or(0)
    }

    pub fn embed_dim(&self) -> usize {
        self.channels() / self.reduction.max(1)
    }

    pub fn downsampling(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn has_local(&self) -> bool {
        self.local_branches && self.relation_attention
    }

    /// Number of branches contributing to the embedding and the loss.
    pub fn num_branches(&self) -> usize {
        usize::from(self.global_branch) + if self.has_local() { 3 } else { 0 }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let reference = toml::Table::try_from(Config::default()).map_err(|e| Error::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        collect_unknown(&table, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        let cfg: Config = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        if !(0.0..=0.4).contains(&d.vertical_shift_range) {
            return bad(format!("data.vertical_shift_range {} outside [0, 0.4]", d.vertical_shift_range));
        }
        if !(0.0..=1.0).contains(&d.occlusion_probability) {
            return bad(format!("data.occlusion_probability {} outside [0, 1]", d.occlusion_probability));
        }
        if !(0.0..=1.0).contains(&t.random_erasing) {
            return bad(format!("train.random_erasing {} outside [0, 1]", t.random_erasing));
        }
        if d.noise_std < 0.0 {
            return bad("data.noise_std must be non-negative".into());
        }
        if d.num_identities == 0 || d.cameras < 2 || d.clips_per_identity_per_cam == 0 || d.frames_per_clip == 0 {
            return bad("data needs identities, at least two cameras, clips and frames".into());
        }
        if d.image_height < 16 || d.image_width < 8 {
            return bad(format!("image {}x{} is too small", d.image_height, d.image_width));
        }
        if m.stages.is_empty() || m.stages.len() != m.strides.len() || m.stages.contains(&0) || m.strides.contains(&0) {
            return bad(format!("model.stages {:?} and model.strides {:?} must be non-empty, positive and of equal length", m.stages, m.strides));
        }
        let f = m.downsampling();
        if !d.image_height.is_multiple_of(f) || !d.image_width.is_multiple_of(f) {
            return bad(format!("downsampling factor {f} does not divide the {}x{} image", d.image_height, d.image_width));
        }
        if d.image_height / f < 3 {
            return bad("feature maps need at least three rows for the part split".into());
        }
        if m.reduction == 0 || !m.channels().is_multiple_of(m.reduction) {
            return bad(format!("model.reduction {} does not divide {} channels", m.reduction, m.channels()));
        }
        if m.num_branches() == 0 {
            return bad("model has neither a global nor a local branch".into());
        }
        if t.ids_per_batch < 2 || t.clips_per_id < 2 {
            return bad(format!(
                "batches need at least 2 identities and 2 clips per identity, got P={} K={}",
                t.ids_per_batch, t.clips_per_id
            ));
        }
        if t.clip_len == 0 || self.eval.clip_len == 0 {
            return bad("clip lengths must be positive".into());
        }
        if self.eval.ranks.is_empty() || self.eval.ranks.contains(&0) {
            return bad("eval.ranks must be positive".into());
        }
        if t.lr <= 0.0 || t.margin < 0.0 || t.reg_weight < 0.0 || t.weight_decay < 0.0 {
            return bad("train.lr must be positive; margin, reg_weight and weight_decay non-negative".into());
        }
        let g = &self.gradcheck;
        if g.step <= 0.0 || g.tolerance <= 0.0 || g.ids < 2 || g.clips_per_id < 2 || g.clip_len == 0 || g.channels == 0 {
            return bad("gradcheck sizes and tolerances must be positive with at least 2 ids and 2 clips each".into());
        }
        if !g.channels.is_multiple_of(m.reduction) || g.map_height < 3 || g.map_width == 0 {
            return bad("gradcheck maps need channels divisible by the reduction and at least 3 rows".into());
        }
        Ok(())
    }
}

fn collect_unknown(table: &toml::Table, reference: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in table {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (value, reference.get(key)) {
            (_, None) => out.push(path),
            (toml::Value::Table(sub), Some(toml::Value::Table(rsub))) => collect_unknown(sub, rsub, &path, out),
            _ => {}
        }
    }
}
