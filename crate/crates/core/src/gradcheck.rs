//! Double-precision gradient verification: every tensor operation on its
//! own, then the network blocks and the training objective on a tiny
//! configuration.

use std::fmt::Write as _;

use rand::Rng as _;
use rapa_tensor::nn::{Ctx, Phase};
use rapa_tensor::{
    grad_check, Conv2dSpec, GradCheckOptions, GradCheckReport, Graph, NormStats, ParamStore, PoolMode, Roi,
    RowReduce, Tensor, TensorError, Var,
};

use crate::backbone::Backbone;
use crate::config::{Config, ModelConfig};
use crate::dataset::Keypoints;
use crate::error::{Error, Result};
use crate::model::{Branch, ClipLayout, LossTerms, Outputs, Rapa};
use crate::rng::{Rng, Streams};
use crate::synth::person_keypoints;

/// Image rows per feature-map row in the tiny model check.
const TINY_SCALE: usize = 4;

#[derive(Clone, Debug)]
pub struct BlockResult {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub tolerance: f64,
    pub blocks: Vec<BlockResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        !self.blocks.is_empty() && self.blocks.iter().all(|b| b.report.passed)
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn block(&self, name: &str) -> Option<&BlockResult> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// One line per block: name, entries checked, worst relative error, the
    /// entry it came from and the verdict.
    pub fn table(&self) -> String {
        let width = self.blocks.iter().map(|b| b.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<width$}  {:>7}  {:>7}  {:>10}  {:>10}  {:>10}  {:<6}  worst entry\n",
            "block", "checked", "refined", "value", "max_abs", "max_rel", "status"
        );
        for b in &self.blocks {
            let r = &b.report;
            let status = if r.passed { "ok" } else { "FAIL" };
            let worst = r
                .worst
                .as_ref()
                .map(|w| format!("{}[{}] analytic {:.6e} numeric {:.6e}", w.param, w.index, w.analytic, w.numeric))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{:<width$}  {:>7}  {:>7}  {:>10.3e}  {:>10.3e}  {:>10.3e}  {:<6}  {worst}",
                b.name, r.checked, r.refined, r.loss, r.max_abs_error, r.max_rel_error, status
            );
        }
        let _ = writeln!(
            s,
            "overall: worst {:.3e} against tolerance {:.0e}: {}",
            self.worst(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        s
    }
}

fn to_tensor_error(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "gradcheck",
            msg: other.to_string(),
        },
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Reduces `out` to a scalar through fixed random weights of magnitude
/// 0.5 to 1.5 so every entry contributes. Random signs keep the sum, and
/// with it the finite-difference round-off, small.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> rapa_tensor::Result<Var> {
    if g.shape(out).iter().product::<usize>() == 1 {
        return Ok(g.sum_all(out));
    }
    let mut rng = Streams::new(seed).get("gradcheck/projection");
    let w = Tensor::from_fn(g.shape(out), |_| {
        let m = rng.gen_range(0.5..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let wv = g.input(&w);
    let prod = g.mul(out, wv)?;
    Ok(g.sum_all(prod))
}

type OpFn = fn(&mut Graph<f64>, &[Var]) -> rapa_tensor::Result<Var>;

/// Operation blocks: a name, input shapes and the expression under test.
fn op_blocks() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    fn s(shapes: &[&[usize]]) -> Vec<Vec<usize>> {
        shapes.iter().map(|x| x.to_vec()).collect()
    }
    const ROI: Roi = Roi {
        top: 1,
        bottom: 3,
        left: 0,
        right: 2,
    };
    vec![
        ("op.add", s(&[&[3, 2], &[3, 2]]), |g, v| g.add(v[0], v[1])),
        ("op.sub", s(&[&[3, 2], &[3, 2]]), |g, v| g.sub(v[0], v[1])),
        ("op.mul", s(&[&[4], &[4]]), |g, v| g.mul(v[0], v[1])),
        ("op.affine", s(&[&[5]]), |g, v| Ok(g.affine(v[0], -1.5, 0.25))),
        ("op.sigmoid", s(&[&[2, 3]]), |g, v| Ok(g.sigmoid(v[0]))),
        ("op.relu", s(&[&[2, 3]]), |g, v| Ok(g.relu(v[0]))),
        ("op.softmax", s(&[&[2, 4]]), |g, v| g.softmax_last(v[0])),
        ("op.log_softmax", s(&[&[3, 5]]), |g, v| g.log_softmax_last(v[0])),
        ("op.linear", s(&[&[3, 4], &[2, 4], &[2]]), |g, v| g.linear(v[0], v[1], Some(v[2]))),
        ("op.matmul", s(&[&[2, 3], &[3, 4]]), |g, v| g.matmul(v[0], v[1])),
        ("op.conv2d", s(&[&[2, 2, 5, 4], &[3, 2, 3, 3], &[3]]), |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec { stride: 2, padding: 1 })
        }),
        ("op.batch_norm", s(&[&[2, 3, 2, 2], &[3], &[3]]), |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, NormStats::Batch)?.0)
        }),
        ("op.batch_norm_fixed", s(&[&[4, 2], &[2], &[2]]), |g, v| {
            let stats = NormStats::Fixed {
                mean: vec![0.1, -0.2],
                var: vec![0.5, 2.0],
            };
            Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, stats)?.0)
        }),
        ("op.gap", s(&[&[2, 3, 3, 2]]), |g, v| g.pool_global(v[0], PoolMode::Avg)),
        ("op.gmp", s(&[&[2, 3, 3, 2]]), |g, v| g.pool_global(v[0], PoolMode::Max)),
        ("op.roi_avg", s(&[&[3, 4, 3]]), |g, v| g.roi_pool(v[0], ROI, PoolMode::Avg)),
        ("op.roi_max", s(&[&[3, 4, 3]]), |g, v| g.roi_pool(v[0], ROI, PoolMode::Max)),
        ("op.reshape", s(&[&[2, 3]]), |g, v| g.reshape(v[0], &[3, 2])),
        ("op.concat", s(&[&[2, 3], &[2, 2]]), |g, v| g.concat(&[v[0], v[1]], 1)),
        ("op.stack", s(&[&[3], &[3]]), |g, v| g.stack(&[v[0], v[1]])),
        ("op.transpose", s(&[&[2, 3]]), |g, v| g.transpose(v[0])),
        ("op.narrow", s(&[&[4, 3]]), |g, v| g.narrow(v[0], 1, 1, 2)),
        ("op.select", s(&[&[3, 2, 2]]), |g, v| g.select(v[0], 2)),
        ("op.sum_axis", s(&[&[2, 3, 2]]), |g, v| g.sum_axis(v[0], 1)),
        ("op.mean_axis", s(&[&[2, 3, 2]]), |g, v| g.mean_axis(v[0], 0)),
        ("op.mean_all", s(&[&[2, 3]]), |g, v| Ok(g.mean_all(v[0]))),
        ("op.sq_diff_channel", s(&[&[2, 3, 2, 2], &[3]]), |g, v| g.sq_diff_channel(v[0], v[1])),
        ("op.pairwise_dist", s(&[&[4, 3]]), |g, v| g.pairwise_dist(v[0], false)),
        ("op.pairwise_dist_sq", s(&[&[4, 3]]), |g, v| g.pairwise_dist(v[0], true)),
        ("op.masked_max", s(&[&[4, 3]]), |g, v| {
            let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
            g.masked_reduce_rows(v[0], &mask, RowReduce::Max)
        }),
        ("op.masked_min", s(&[&[4, 3]]), |g, v| {
            let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
            g.masked_reduce_rows(v[0], &mask, RowReduce::Min)
        }),
        ("op.gather_cols", s(&[&[3, 4]]), |g, v| g.gather_cols(v[0], &[3, 0, 2])),
    ]
}

fn check_op(name: &str, shapes: &[Vec<usize>], f: OpFn, seed: u64, opts: &GradCheckOptions) -> Result<BlockResult> {
    let mut rng = Streams::new(seed).get(name);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("x{i}"), uniform(s, -1.0, 1.0, &mut rng)))
        .collect();
    let report = grad_check(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let out = f(&mut g, &vars)?;
            let loss = project(&mut g, out, seed)?;
            Ok((g, loss))
        },
        opts,
    )?;
    Ok(BlockResult {
        name: name.to_string(),
        report,
    })
}

/// The tiny batch: `ids × clips_per_id` clips of `clip_len` frames.
struct Tiny {
    model_cfg: ModelConfig,
    labels: Vec<usize>,
    keypoints: Vec<Keypoints>,
    clip_len: usize,
    channels: usize,
    map: (usize, usize),
}

impl Tiny {
    fn new(cfg: &Config, rng: &mut Rng) -> Result<Self> {
        let gc = &cfg.gradcheck;
        if gc.ids < 2 || gc.clips_per_id < 2 || gc.clip_len == 0 {
            return Err(Error::Config("gradcheck needs at least 2 ids with 2 clips each".into()));
        }
        if gc.map_height < 3 || gc.channels < cfg.model.reduction {
            return Err(Error::Config(format!(
                "gradcheck maps need 3+ rows and at least {} channels",
                cfg.model.reduction
            )));
        }
        let mut model_cfg = cfg.model.clone();
        // The check covers every branch and the regularizer whatever the
        // training config switches off.
        model_cfg.global_branch = true;
        model_cfg.local_branches = true;
        model_cfg.relation_attention = true;
        model_cfg.interframe_reg = true;
        model_cfg.stages = vec![4, gc.channels];
        model_cfg.strides = vec![2, 1];

        let labels: Vec<usize> = (0..gc.ids).flat_map(|i| std::iter::repeat_n(i, gc.clips_per_id)).collect();
        let height = gc.map_height * TINY_SCALE;
        let person = person_keypoints(0, height);
        let slack = height - 1 - person.ankle;
        let keypoints = (0..labels.len() * gc.clip_len)
            .map(|_| person_keypoints(rng.gen_range(0..=slack), height))
            .collect();
        Ok(Tiny {
            model_cfg,
            labels,
            keypoints,
            clip_len: gc.clip_len,
            channels: gc.channels,
            map: (gc.map_height, gc.map_width),
        })
    }

    fn frames(&self) -> usize {
        self.keypoints.len()
    }
}

type Pick = fn(&mut Graph<f64>, &Outputs, &LossTerms) -> Option<Var>;

fn branch_feature(out: &Outputs, b: Branch) -> Option<Var> {
    out.branches.iter().find(|(x, _)| *x == b).map(|&(_, v)| v)
}

fn branch_loss(g: &mut Graph<f64>, terms: &LossTerms, b: Branch) -> Option<Var> {
    let tri = terms.triplet.iter().find(|(x, _)| *x == b)?.1;
    let ce = terms.ce.iter().find(|(x, _)| *x == b)?.1;
    g.add(tri, ce).ok()
}

/// Model blocks checked from feature-map inputs: which scalar of the
/// forward pass each one differentiates.
fn model_blocks() -> Vec<(&'static str, Pick)> {
    vec![
        ("model.global_feature", |_, o, _| branch_feature(o, Branch::Global)),
        ("model.part1_feature", |_, o, _| branch_feature(o, Branch::Part(0))),
        ("model.part2_feature", |_, o, _| branch_feature(o, Branch::Part(1))),
        ("model.part3_feature", |_, o, _| branch_feature(o, Branch::Part(2))),
        ("loss.global", |g, _, t| branch_loss(g, t, Branch::Global)),
        ("loss.part1", |g, _, t| branch_loss(g, t, Branch::Part(0))),
        ("loss.part2", |g, _, t| branch_loss(g, t, Branch::Part(1))),
        ("loss.part3", |g, _, t| branch_loss(g, t, Branch::Part(2))),
        ("loss.reg", |_, _, t| t.reg),
        ("loss.total", |_, _, t| Some(t.total)),
    ]
}

fn check_model(cfg: &Config, tiny: &Tiny, opts: &GradCheckOptions, seed: u64) -> Result<Vec<BlockResult>> {
    let streams = Streams::new(seed);
    let mut store = ParamStore::<f64>::new();
    let (mh, mw) = tiny.map;
    let maps_id = store.add(
        "input.maps",
        uniform(&[tiny.frames(), tiny.channels, mh, mw], -1.0, 1.0, &mut streams.get("gradcheck/maps")),
    );
    let num_classes = tiny.labels.iter().max().map_or(0, |m| m + 1);
    let model = Rapa::head_only(
        &mut store,
        &tiny.model_cfg,
        tiny.channels,
        num_classes,
        &mut streams.get("gradcheck/model"),
    );
    let layout = ClipLayout {
        clip_len: tiny.clip_len,
        keypoints: &tiny.keypoints,
    };
    let mut results = Vec::new();
    for (name, pick) in model_blocks() {
        let report = grad_check(
            &mut store,
            |s| {
                let mut ctx = Ctx::new(s, Phase::Train);
                let maps = ctx.param(maps_id);
                let out = model
                    .forward_maps(&mut ctx, maps, layout, TINY_SCALE as f64)
                    .map_err(to_tensor_error)?;
                let terms = model
                    .losses(&mut ctx, &out, &tiny.labels, cfg.train.margin, cfg.train.reg_weight)
                    .map_err(to_tensor_error)?;
                let picked = pick(&mut ctx.g, &out, &terms).ok_or_else(|| TensorError::InvalidArgument {
                    op: "gradcheck",
                    msg: format!("{name} is not produced by the tiny model"),
                })?;
                let loss = project(&mut ctx.g, picked, seed)?;
                Ok((ctx.finish().0, loss))
            },
            opts,
        )?;
        results.push(BlockResult {
            name: name.to_string(),
            report,
        });
    }
    Ok(results)
}

fn check_backbone(tiny: &Tiny, opts: &GradCheckOptions, seed: u64) -> Result<BlockResult> {
    let streams = Streams::new(seed);
    let mut store = ParamStore::<f64>::new();
    let backbone = Backbone::new(&mut store, &tiny.model_cfg, &mut streams.get("gradcheck/backbone"));
    let (mh, mw) = tiny.map;
    let f = backbone.downsampling;
    let frames_id = store.add(
        "input.frames",
        uniform(&[tiny.frames(), 3, mh * f, mw * f], 0.0, 1.0, &mut streams.get("gradcheck/frames")),
    );
    let report = grad_check(
        &mut store,
        |s| {
            let mut ctx = Ctx::new(s, Phase::Train);
            let x = ctx.param(frames_id);
            let maps = backbone.forward(&mut ctx, x).map_err(to_tensor_error)?;
            let loss = project(&mut ctx.g, maps, seed)?;
            Ok((ctx.finish().0, loss))
        },
        opts,
    )?;
    Ok(BlockResult {
        name: "model.backbone".into(),
        report,
    })
}

/// Runs every block. `cfg.gradcheck.inject_bug` scales the analytic
/// gradients by 1.01 so that a working checker must report failure.
pub fn run(cfg: &Config) -> Result<Report> {
    let gc = &cfg.gradcheck;
    let opts = GradCheckOptions {
        step: gc.step,
        rel_tol: gc.tolerance,
        corrupt: gc.inject_bug.then_some(1.01),
        refinements: gc.refinements,
    };
    let mut blocks = Vec::new();
    for (name, shapes, f) in op_blocks() {
        blocks.push(check_op(name, &shapes, f, cfg.seed, &opts)?);
    }
    let tiny = Tiny::new(cfg, &mut Streams::new(cfg.seed).get("gradcheck/keypoints"))?;
    blocks.push(check_backbone(&tiny, &opts, cfg.seed)?);
    blocks.extend(check_model(cfg, &tiny, &opts, cfg.seed)?);
    Ok(Report {
        tolerance: gc.tolerance,
        blocks,
    })
}
