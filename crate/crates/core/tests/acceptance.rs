//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.
//!
//! Criteria 5 and 6 train the full ablation sweep on the default synthetic
//! benchmark, which takes about an hour on one core.

use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapa::ablate::{self, Variant};
use rapa::config::{AttentionNorm, ChannelWeights, Config};
use rapa::eval::evaluate_model;
use rapa::gradcheck;
use rapa::losses::batch_hard_triplet;
use rapa::pfd::{attention_map, interframe_reg, Aggregation, PartBlock};
use rapa::retrieval::{cmc, mean_ap, Label};
use rapa::rfl::{reference_features, QualityBlock};
use rapa::synth;
use rapa::train::{init_model, log_csv, train};
use rapa_tensor::nn::{BatchNorm, Ctx, Phase};
use rapa_tensor::{Graph, NormStats, ParamStore, Roi, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let report = match gradcheck::run(&Config::default()) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("gradcheck errored: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let branches = ["loss.global", "loss.part1", "loss.part2", "loss.part3", "loss.reg", "loss.total"];
    let covered = branches.iter().all(|b| report.block(b).is_some());
    let failing: Vec<&str> = report
        .blocks
        .iter()
        .filter(|b| !b.report.passed)
        .map(|b| b.name.as_str())
        .collect();
    Outcome::new(
        report.passed() && covered && secs < 120.0,
        format!(
            "{} blocks, worst rel error {:.2e}, {secs:.1}s, failing {failing:?}",
            report.blocks.len(),
            report.worst()
        ),
    )
}

/// Per anchor, the largest hinge over every (positive, negative) pair.
fn triplet_oracle(x: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let d = |i: usize, j: usize| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let n = x.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = 0.0f64;
        for p in (0..n).filter(|&p| labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                worst = worst.max(margin + d(a, p) - d(a, q));
            }
        }
        total += worst;
    }
    total
}

/// Rank of each valid gallery item for one query, counting every valid item
/// that sorts before it.
fn rank_of(row: &[f64], q: Label, gallery: &[Label], j: usize) -> usize {
    let valid = |i: usize| !(gallery[i].identity == q.identity && gallery[i].camera == q.camera);
    (0..gallery.len())
        .filter(|&i| valid(i) && (row[i] < row[j] || (row[i] == row[j] && i < j)))
        .count()
        + 1
}

fn retrieval_oracle(dist: &[Vec<f64>], queries: &[Label], gallery: &[Label], ranks: &[usize]) -> (Vec<f64>, f64) {
    let mut hits = vec![0.0; ranks.len()];
    let mut ap_sum = 0.0;
    let mut valid = 0.0;
    for (row, &q) in dist.iter().zip(queries) {
        let relevant: Vec<usize> = (0..gallery.len())
            .filter(|&j| gallery[j].identity == q.identity && gallery[j].camera != q.camera)
            .collect();
        if relevant.is_empty() {
            continue;
        }
        valid += 1.0;
        let mut rel_ranks: Vec<usize> = relevant.iter().map(|&j| rank_of(row, q, gallery, j)).collect();
        rel_ranks.sort_unstable();
        for (h, &r) in hits.iter_mut().zip(ranks) {
            if rel_ranks[0] <= r {
                *h += 1.0;
            }
        }
        let ap: f64 = rel_ranks
            .iter()
            .enumerate()
            .map(|(k, &r)| (k + 1) as f64 / r as f64)
            .sum::<f64>()
            / rel_ranks.len() as f64;
        ap_sum += ap;
    }
    let denom = if valid > 0.0 { valid } else { 1.0 };
    (hits.into_iter().map(|h| h / denom).collect(), ap_sum / denom)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut tri_err, mut cmc_err, mut ap_err) = (0.0f64, 0.0f64, 0.0f64);
    let instances = 250;
    for _ in 0..instances {
        let p = rng.gen_range(2..=5);
        let k = rng.gen_range(2..=(20 / p).min(4));
        let dim = rng.gen_range(1..=6);
        let mut labels: Vec<usize> = (0..p).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        labels.shuffle(&mut rng);
        let x: Vec<Vec<f64>> = labels
            .iter()
            .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let margin = rng.gen_range(0.0..1.0);
        let mut g = Graph::<f64>::new();
        let feats = g.input(&Tensor::new(&[x.len(), dim], x.concat()).unwrap());
        let loss = batch_hard_triplet(&mut g, feats, &labels, margin).unwrap();
        tri_err = tri_err.max((g.item(loss) - triplet_oracle(&x, &labels, margin)).abs());

        let nq = rng.gen_range(1..=10);
        let ng = rng.gen_range(1..=20);
        let ids = rng.gen_range(1..=5);
        let lab = |rng: &mut ChaCha8Rng| Label {
            identity: rng.gen_range(0..ids),
            camera: rng.gen_range(0..2),
        };
        let queries: Vec<Label> = (0..nq).map(|_| lab(&mut rng)).collect();
        let gallery: Vec<Label> = (0..ng).map(|_| lab(&mut rng)).collect();
        // Small integer distances force ties.
        let ties = rng.gen_bool(0.5);
        let dist: Vec<Vec<f64>> = (0..nq)
            .map(|_| {
                (0..ng)
                    .map(|_| if ties { rng.gen_range(0..4) as f64 } else { rng.gen_range(0.0..10.0) })
                    .collect()
            })
            .collect();
        let ranks = [1, 3, 5, 20];
        let (want_cmc, want_ap) = retrieval_oracle(&dist, &queries, &gallery, &ranks);
        let got_cmc = cmc(&dist, &queries, &gallery, &ranks).unwrap();
        cmc_err = got_cmc.iter().zip(&want_cmc).map(|(a, b)| (a - b).abs()).fold(cmc_err, f64::max);
        ap_err = ap_err.max((mean_ap(&dist, &queries, &gallery).unwrap() - want_ap).abs());
    }
    Outcome::new(
        tri_err < 1e-9 && cmc_err < 1e-9 && ap_err < 1e-9,
        format!("{instances} instances each; max |diff| triplet {tri_err:.1e}, cmc {cmc_err:.1e}, mAP {ap_err:.1e}"),
    )
}

fn formula_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let norm = BatchNorm::new(&mut store, "bn", 5, false);
    *store.get_mut(norm.gamma) = Tensor::from_fn(&[5], |_| rng.gen_range(0.5..2.0));
    *store.get_mut(norm.beta) = random(&[5], &mut rng);
    let quality = QualityBlock::new(&mut store, "quality", 5, &mut rng);
    let maps = random(&[3, 5, 6, 4], &mut rng);
    let r = random(&[5], &mut rng);

    let mut ctx = Ctx::new(&store, Phase::Train);
    let m = ctx.g.input(&maps);
    let rv = ctx.g.input(&r);
    let d = ctx.g.sq_diff_channel(m, rv).unwrap();
    let a = attention_map(&mut ctx, d, &norm).unwrap();
    let (gamma, beta) = (ctx.param(norm.gamma), ctx.param(norm.beta));
    let (bn, _) = ctx.g.batch_norm(d, gamma, beta, norm.eps, NormStats::Batch).unwrap();
    let neg = ctx.g.scale(bn, -1.0);
    let direct = ctx.g.sigmoid(neg);
    let attn_err = ctx
        .g
        .value(a)
        .iter()
        .zip(ctx.g.value(direct))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    // Reg: identical frames give zero; two frames [1,2] and [3,5] give 2·13.
    let same = ctx.g.input(&Tensor::new(&[3, 2], vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap());
    let reg_same = interframe_reg(&mut ctx.g, &[same, same]).unwrap();
    let two = ctx.g.input(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 5.0]).unwrap());
    let reg_two = interframe_reg(&mut ctx.g, &[two]).unwrap();
    let reg_ok = ctx.g.item(reg_same) == 0.0 && (ctx.g.item(reg_two) - 26.0).abs() < 1e-12;

    let rois = [
        Roi { top: 0, bottom: 2, left: 0, right: 4 },
        Roi { top: 2, bottom: 4, left: 1, right: 3 },
        Roi { top: 4, bottom: 6, left: 0, right: 4 },
    ];
    let refs = reference_features(&mut ctx.g, m, 1, rois).unwrap();
    let pool_ok = refs.max.iter().zip(&refs.avg).all(|(&mx, &av)| {
        ctx.g.value(mx).iter().zip(ctx.g.value(av)).all(|(x, y)| x >= y)
    });

    let desc = ctx.g.input(&Tensor::from_fn(&[4, 5], |i| if i < 5 { 50.0 } else { rng.gen_range(-1.0..1.0) }));
    let (_, q) = quality.forward(&mut ctx, desc).unwrap();
    let q_ok = ctx.g.value(q).iter().all(|&v| v > 0.0 && v < 1.0);

    Outcome::new(
        attn_err < 1e-15 && reg_ok && pool_ok && q_ok,
        format!("|A − σ(−BN(D))| ≤ {attn_err:.1e}; Reg identities {reg_ok}; max ≥ avg {pool_ok}; q in (0,1) {q_ok}"),
    )
}

fn permutation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, c, h, w) = (4, 6, 8, 4);
    let mut store = ParamStore::<f64>::new();
    let blocks: Vec<PartBlock> = (0..3)
        .map(|p| PartBlock::new(&mut store, &format!("part{p}"), c, 2, AttentionNorm::Clip, &mut rng))
        .collect();
    let norm_params: Vec<_> = store
        .iter()
        .filter(|(_, name, _)| name.ends_with("gamma") || name.ends_with("beta"))
        .map(|(id, _, t)| (id, t.shape().to_vec()))
        .collect();
    for (id, shape) in norm_params {
        *store.get_mut(id) = Tensor::from_fn(&shape, |_| rng.gen_range(0.5..1.5));
    }
    let maps = random(&[t, c, h, w], &mut rng);
    let mut perm: Vec<usize> = (0..h * w).collect();
    perm.shuffle(&mut rng);
    let permuted = Tensor::from_fn(&[t, c, h, w], |i| {
        let (plane, cell) = (i / (h * w), i % (h * w));
        maps.data()[plane * h * w + perm[cell]]
    });
    let refs: Vec<[Tensor<f64>; 2]> = (0..3).map(|_| [random(&[c], &mut rng), random(&[c], &mut rng)]).collect();

    let mut worst = 0.0f64;
    for aggregation in [
        Aggregation::Scores(ChannelWeights::Literal),
        Aggregation::Scores(ChannelWeights::Softmax),
        Aggregation::Mean,
    ] {
        let mut outs = Vec::new();
        for input in [&maps, &permuted] {
            let mut ctx = Ctx::new(&store, Phase::Train);
            let m = ctx.g.input(input);
            let mut vals = Vec::new();
            for (block, r) in blocks.iter().zip(&refs) {
                let rv = [ctx.g.input(&r[0]), ctx.g.input(&r[1])];
                let out = block.forward(&mut ctx, m, rv, aggregation).unwrap();
                for v in out.aggregated {
                    vals.extend_from_slice(ctx.g.value(v));
                }
            }
            outs.push(vals);
        }
        worst = outs[0].iter().zip(&outs[1]).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Outcome::new(worst < 1e-6, format!("max |Δ f̃_p| over 3 parts, 3 aggregations: {worst:.1e}"))
}

fn benchmark() -> (Config, rapa::dataset::Dataset) {
    let cfg = Config::default();
    let ds = synth::generate(&cfg.data, cfg.seed).expect("benchmark generates");
    (cfg, ds)
}

fn ablation(cfg: &Config, ds: &rapa::dataset::Dataset) -> (Outcome, Outcome) {
    let start = Instant::now();
    let result = match ablate::run(cfg, ds, None, |msg| eprintln!("  {msg}")) {
        Ok(r) => r,
        Err(e) => {
            let fail = Outcome::new(false, format!("sweep errored: {e}"));
            return (fail, Outcome::new(false, "sweep errored"));
        }
    };
    let secs = start.elapsed().as_secs_f64();
    eprint!("{}", result.table1_csv());
    eprint!("{}", result.table2_csv());
    let r1 = |v| result.rank(v, 1).unwrap_or(f64::NAN);
    let (a, d, f) = (r1(Variant::A), r1(Variant::D), r1(Variant::F));
    let ladder = a <= d + 1.0 && d <= f + 1.0;
    let c5 = Outcome::new(
        f - a >= 5.0 && ladder && secs < 7200.0,
        format!(
            "rank-1 % over seeds {:?}: a {a:.1}, d {d:.1}, f {f:.1} (f − a = {:.1}); sweep {:.0} min",
            cfg.ablate.seeds,
            f - a,
            secs / 60.0
        ),
    );
    let map = |v| result.map(v).unwrap_or(f64::NAN);
    let (g, l, gl) = (map(Variant::A), map(Variant::LocalOnly), map(Variant::F));
    let c6 = Outcome::new(
        gl >= g.max(l) - 1.0,
        format!("mAP %: global {g:.1}, local {l:.1}, global+local {gl:.1}"),
    );
    (c5, c6)
}

fn determinism(cfg: &Config, ds: &rapa::dataset::Dataset) -> Outcome {
    let mut cfg = cfg.clone();
    cfg.train.epochs = 2;
    let run = || {
        let trained = train(&cfg, ds, None, |_| {}).expect("training runs");
        let ev = evaluate_model(&trained.model, &trained.store, ds, &cfg.eval).expect("evaluation runs");
        (log_csv(&trained.log), ev.metrics.to_json(), ev.query)
    };
    let (log1, m1, e1) = run();
    let (log2, m2, e2) = run();
    let same_emb = e1.iter().flatten().zip(e2.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
    Outcome::new(
        log1 == log2 && m1 == m2 && same_emb,
        format!("2-epoch runs: log identical {}, metrics identical {}, embeddings bit-identical {same_emb}", log1 == log2, m1 == m2),
    )
}

fn chance_level(cfg: &Config, ds: &rapa::dataset::Dataset) -> Outcome {
    let (model, store) = init_model(cfg, ds.num_identities());
    let ev = match evaluate_model(&model, &store, ds, &cfg.eval) {
        Ok(ev) => ev,
        Err(e) => return Outcome::new(false, format!("evaluation errored: {e}")),
    };
    let p = 1.0 / ds.num_identities() as f64;
    let n = ev.metrics.queries as f64;
    let se = (p * (1.0 - p) / n).sqrt();
    let r1 = ev.metrics.rank(1).unwrap_or(f64::NAN);
    Outcome::new(
        (r1 - p).abs() <= 3.0 * se,
        format!("rank-1 {r1:.4} vs chance {p:.4} ± {:.4} (3 SE, {n} queries)", 3.0 * se),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n, name, o: Outcome| {
        println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "oracle equivalence", oracle_equivalence());
    report(3, "formula identities", formula_identities());
    report(4, "spatial permutation invariance", permutation_invariance());
    let (cfg, ds) = benchmark();
    report(8, "chance level", chance_level(&cfg, &ds));
    report(7, "determinism", determinism(&cfg, &ds));
    let (c5, c6) = ablation(&cfg, &ds);
    report(5, "directional ablation", c5);
    report(6, "branch complementarity", c6);

    results.sort_by_key(|r| r.0);
    println!("summary:");
    for (n, name, o) in &results {
        println!("  {n}. {name}: {}", if o.pass { "PASS" } else { "FAIL" });
    }
    if results.iter().all(|r| r.2.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
