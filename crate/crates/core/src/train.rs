//! Training loop: P×K sampling, augmentation, Adam with step decay, loss
//! log and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::Rng as _;
use rapa_tensor::nn::{apply_running_updates, Ctx, Phase};
use rapa_tensor::{io, Adam, AdamConfig, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::{Dataset, Keypoints, Split};
use crate::error::{Error, Result};
use crate::model::{Branch, ClipLayout, Rapa};
use crate::rng::{Rng, Streams};
use crate::synth::{random_crop, random_erasing};

pub const LOG_HEADER: &str =
    "epoch,step,L_tri_g,L_ce_g,L_tri_p1,L_tri_p2,L_tri_p3,L_ce_p1,L_ce_p2,L_ce_p3,L_reg,L_total";

/// Loss components of one optimisation step; absent branches read 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    /// Indexed global, part1, part2, part3.
    pub triplet: [f32; 4],
    pub ce: [f32; 4],
    pub reg: f32,
    pub total: f32,
}

impl LogRow {
    pub fn csv_line(&self) -> String {
        let [tg, t1, t2, t3] = self.triplet;
        let [cg, c1, c2, c3] = self.ce;
        format!(
            "{},{},{tg},{cg},{t1},{t2},{t3},{c1},{c2},{c3},{},{}",
            self.epoch, self.step, self.reg, self.total
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// One P×K batch ready for the forward pass.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(P·K·T, 3, H, W)`.
    pub frames: Tensor<f32>,
    pub keypoints: Vec<Keypoints>,
    pub labels: Vec<usize>,
    pub clip_len: usize,
}

/// Draws P×K batches from the training split.
pub struct PkSampler<'a> {
    ds: &'a Dataset,
    by_identity: BTreeMap<usize, Vec<usize>>,
    p: usize,
    k: usize,
    t: usize,
}

impl<'a> PkSampler<'a> {
    pub fn new(ds: &'a Dataset, p: usize, k: usize, t: usize) -> Result<Self> {
        if p < 2 || k < 2 {
            return Err(Error::Config(format!("P={p} and K={k} must both be at least 2")));
        }
        let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, c) in ds.clips.iter().enumerate() {
            if c.split == Split::Train && !c.is_empty() {
                by_identity.entry(c.identity).or_default().push(i);
            }
        }
        if by_identity.len() < p {
            return Err(Error::Data(format!(
                "{} training identities cannot fill batches of P={p}",
                by_identity.len()
            )));
        }
        Ok(PkSampler { ds, by_identity, p, k, t })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.by_identity.len() / self.p
    }

    /// Identity groups of one epoch: shuffled, chunked by P, remainder dropped.
    pub fn epoch(&self, rng: &mut Rng) -> Vec<Vec<usize>> {
        let mut ids: Vec<usize> = self.by_identity.keys().copied().collect();
        ids.shuffle(rng);
        ids.chunks_exact(self.p).map(<[usize]>::to_vec).collect()
    }

    /// Samples K clips per identity and T frames per clip (in temporal
    /// order), applying the augmentations.
    pub fn batch(&self, ids: &[usize], aug: &Augment, rng: &mut Rng) -> Batch {
        let (h, w) = self.ds.image_size();
        let n = ids.len() * self.k * self.t;
        let plane = 3 * h * w;
        let mut data = Vec::with_capacity(n * plane);
        let mut keypoints = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(ids.len() * self.k);
        for &id in ids {
            let pool = &self.by_identity[&id];
            let clips: Vec<usize> = if pool.len() >= self.k {
                let mut picked = pool.iter().copied().choose_multiple(rng, self.k);
                picked.shuffle(rng);
                picked
            } else {
                (0..self.k).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
            };
            for ci in clips {
                let clip = &self.ds.clips[ci];
                labels.push(id);
                for fi in sample_frames(clip.len(), self.t, rng) {
                    let (mut frame, kp) = if aug.crop {
                        random_crop(&clip.frames[fi], &clip.keypoints[fi], aug.crop_padding, rng)
                    } else {
                        (clip.frames[fi].clone(), clip.keypoints[fi])
                    };
                    if aug.erasing > 0.0 && rng.gen_bool(aug.erasing) {
                        random_erasing(&mut frame, rng);
                    }
                    data.extend_from_slice(frame.data());
                    keypoints.push(kp);
                }
            }
        }
        Batch {
            frames: Tensor::new(&[n, 3, h, w], data).expect("batch shape"),
            keypoints,
            labels,
            clip_len: self.t,
        }
    }
}

/// `t` frame indices of an `n`-frame clip in increasing order; distinct
/// when the clip is long enough.
fn sample_frames(n: usize, t: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = if n >= t {
        (0..n).choose_multiple(rng, t)
    } else {
        (0..t).map(|_| rng.gen_range(0..n)).collect()
    };
    idx.sort_unstable();
    idx
}

#[derive(Clone, Copy, Debug)]
pub struct Augment {
    pub crop: bool,
    pub crop_padding: usize,
    pub erasing: f64,
}

impl Augment {
    pub fn from_config(cfg: &Config) -> Self {
        Augment {
            crop: cfg.train.random_crop,
            crop_padding: cfg.train.crop_padding,
            erasing: cfg.train.random_erasing,
        }
    }
}

/// Learning rate after `epoch` completed epochs.
pub fn lr_at(cfg: &Config, epoch: usize) -> f64 {
    let t = &cfg.train;
    let drops = if t.lr_decay_every == 0 { 0 } else { epoch / t.lr_decay_every };
    t.lr * t.lr_decay.powi(drops as i32)
}

/// A freshly initialised model and its parameters for `num_classes`
/// identities.
pub fn init_model(cfg: &Config, num_classes: usize) -> (Rapa, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let model = Rapa::new(&mut store, &cfg.model, num_classes, &mut Streams::new(cfg.seed).get("model/init"));
    (model, store)
}

pub struct Trained {
    pub model: Rapa,
    pub store: ParamStore<f32>,
    pub log: Vec<LogRow>,
}

/// Trains on the training split of `ds`. With `out`, writes the effective
/// config, the loss log and checkpoints there.
pub fn train(
    cfg: &Config,
    ds: &Dataset,
    out: Option<&Path>,
    mut progress: impl FnMut(&LogRow),
) -> Result<Trained> {
    cfg.validate()?;
    let (h, w) = ds.image_size();
    if (h, w) != (cfg.data.image_height, cfg.data.image_width) {
        return Err(Error::Config(format!(
            "dataset frames are {h}x{w} but the config expects {}x{}",
            cfg.data.image_height, cfg.data.image_width
        )));
    }
    let t = &cfg.train;
    let sampler = PkSampler::new(ds, t.ids_per_batch, t.clips_per_id, t.clip_len)?;
    let (model, mut store) = init_model(cfg, ds.num_identities());
    let mut adam = Adam::new(AdamConfig {
        lr: t.lr,
        weight_decay: t.weight_decay,
        decoupled: t.decoupled_weight_decay,
        ..AdamConfig::default()
    });
    let streams = Streams::new(cfg.seed);
    let mut sample_rng = streams.get("train/sampler");
    let mut aug_rng = streams.get("train/augment");
    let aug = Augment::from_config(cfg);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.save(&dir.join("config.toml"))?;
    }

    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..t.epochs {
        adam.set_lr(lr_at(cfg, epoch));
        for ids in sampler.epoch(&mut sample_rng) {
            let batch = sampler.batch(&ids, &aug, &mut aug_rng);
            let row = train_step(&model, &mut store, &mut adam, &batch, cfg, epoch, step)?;
            progress(&row);
            log.push(row);
            step += 1;
        }
        if let Some(dir) = out {
            let done = epoch + 1;
            if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 && done < t.epochs {
                save_checkpoint(&store, &dir.join("checkpoints").join(format!("epoch_{done}")), done)?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&store, &dir.join("checkpoint"), t.epochs)?;
        let path = dir.join("train_log.csv");
        fs::write(&path, log_csv(&log)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(Trained { model, store, log })
}

fn train_step(
    model: &Rapa,
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    batch: &Batch,
    cfg: &Config,
    epoch: usize,
    step: usize,
) -> Result<LogRow> {
    let mut ctx = Ctx::new(store, Phase::Train);
    let frames = ctx.g.input(&batch.frames);
    let layout = ClipLayout {
        clip_len: batch.clip_len,
        keypoints: &batch.keypoints,
    };
    let out = model.forward_frames(&mut ctx, frames, layout)?;
    let terms = model.losses(&mut ctx, &out, &batch.labels, cfg.train.margin, cfg.train.reg_weight)?;
    let (g, updates) = ctx.finish();
    let mut row = LogRow {
        epoch,
        step,
        triplet: [0.0; 4],
        ce: [0.0; 4],
        reg: terms.reg.map_or(0.0, |r| g.item(r)),
        total: g.item(terms.total),
    };
    for (&(b, tri), &(_, ce)) in terms.triplet.iter().zip(&terms.ce) {
        let slot = match b {
            Branch::Global => 0,
            Branch::Part(p) => p + 1,
        };
        row.triplet[slot] = g.item(tri);
        row.ce[slot] = g.item(ce);
    }
    if !row.total.is_finite() {
        return Err(Error::Data(format!("non-finite loss at epoch {epoch} step {step}")));
    }
    g.backward_into(terms.total, store)?;
    drop(g);
    adam.step(store);
    apply_running_updates(store, &updates);
    store.zero_grad();
    Ok(row)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    epoch: usize,
    tensors: Vec<CheckpointEntry>,
}

/// Writes every parameter and buffer as a tensor file plus a manifest.
pub fn save_checkpoint(store: &ParamStore<f32>, dir: &Path, epoch: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (_, name, t) in store.iter() {
        let file = format!("{name}.rapt");
        let path = dir.join(&file);
        io::save(t, &path).map_err(|e| Error::format(&path, e.to_string()))?;
        tensors.push(CheckpointEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&CheckpointManifest { epoch, tensors }).expect("manifest serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint into `store`, which must hold exactly the same
/// tensors.
pub fn load_checkpoint(store: &mut ParamStore<f32>, dir: &Path) -> Result<usize> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let expected: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
    let found: Vec<&str> = manifest.tensors.iter().map(|e| e.name.as_str()).collect();
    let missing: Vec<&str> = expected.iter().map(String::as_str).filter(|n| !found.contains(n)).collect();
    let extra: Vec<&str> = found.iter().copied().filter(|n| !expected.iter().any(|e| e == n)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Checkpoint(format!(
            "missing tensors [{}], unexpected tensors [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    for entry in &manifest.tensors {
        let id = store.id(&entry.name).expect("checked above");
        let path = dir.join(&entry.file);
        let t: Tensor<f32> = io::load(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                entry.name,
                t.shape(),
                store.get(id).shape()
            )));
        }
        store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok(manifest.epoch)
}
