//! Query/gallery embedding and metric computation for a trained model.

use std::path::Path;

use rapa_tensor::nn::{Ctx, Phase};
use rapa_tensor::{io, ParamStore, Tensor};

use crate::config::EvalConfig;
use crate::dataset::{Dataset, Split, VideoClip};
use crate::error::{Error, Result};
use crate::model::{ClipLayout, Rapa};
use crate::retrieval::{distance_matrix, evaluate, split_clips, video_embedding, Label, Metrics};

/// Video-level embedding: the mean of the embeddings of its length-T clips.
pub fn embed_video(model: &Rapa, store: &ParamStore<f32>, video: &VideoClip, cfg: &EvalConfig) -> Result<Vec<f64>> {
    if video.is_empty() {
        return Err(Error::Data("cannot embed a video without frames".into()));
    }
    let clips = split_clips(video.len(), cfg.clip_len, cfg.remainder);
    let shape = video.frames[0].shape().to_vec();
    let mut data = Vec::with_capacity(clips.len() * cfg.clip_len * video.frames[0].numel());
    let mut keypoints = Vec::new();
    for &fi in clips.iter().flatten() {
        data.extend_from_slice(video.frames[fi].data());
        keypoints.push(video.keypoints[fi]);
    }
    let n = keypoints.len();
    let frames = Tensor::new(&[n, shape[0], shape[1], shape[2]], data)?;
    let mut ctx = Ctx::new(store, Phase::Eval);
    let x = ctx.g.input(&frames);
    let layout = ClipLayout {
        clip_len: cfg.clip_len,
        keypoints: &keypoints,
    };
    let out = model.forward_frames(&mut ctx, x, layout)?;
    let emb = model.embedding(&mut ctx.g, &out)?;
    let d = ctx.g.shape(emb)[1];
    let rows: Vec<Vec<f64>> = ctx
        .g
        .value(emb)
        .chunks(d)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    video_embedding(&rows)
}

/// Embeddings and labels of one split.
pub fn embed_split(
    model: &Rapa,
    store: &ParamStore<f32>,
    ds: &Dataset,
    split: Split,
    cfg: &EvalConfig,
) -> Result<(Vec<Vec<f64>>, Vec<Label>)> {
    let mut embs = Vec::new();
    let mut labels = Vec::new();
    for clip in ds.split(split) {
        embs.push(embed_video(model, store, clip, cfg)?);
        labels.push(Label {
            identity: clip.identity,
            camera: clip.camera,
        });
    }
    Ok((embs, labels))
}

pub struct Evaluation {
    pub metrics: Metrics,
    pub query: Vec<Vec<f64>>,
    pub gallery: Vec<Vec<f64>>,
}

pub fn evaluate_model(model: &Rapa, store: &ParamStore<f32>, ds: &Dataset, cfg: &EvalConfig) -> Result<Evaluation> {
    let (query, ql) = embed_split(model, store, ds, Split::Query, cfg)?;
    let (gallery, gl) = embed_split(model, store, ds, Split::Gallery, cfg)?;
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Data("dataset has an empty query or gallery split".into()));
    }
    let dist = distance_matrix(&query, &gallery)?;
    let metrics = evaluate(&dist, &ql, &gl, &cfg.ranks)?;
    Ok(Evaluation { metrics, query, gallery })
}

impl Evaluation {
    /// Metrics as CSV and JSON plus both embedding matrices as tensor files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.metrics.write(dir)?;
        for (name, rows) in [("query_embeddings.rapt", &self.query), ("gallery_embeddings.rapt", &self.gallery)] {
            let d = rows[0].len();
            let t = Tensor::new(&[rows.len(), d], rows.iter().flatten().copied().collect())?;
            let path = dir.join(name);
            io::save(&t, &path).map_err(|e| Error::format(&path, e.to_string()))?;
        }
        Ok(())
    }
}
