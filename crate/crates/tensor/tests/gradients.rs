//! Reverse-mode gradients of every operation against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapa_tensor::{
    grad_check, Conv2dSpec, GradCheckOptions, GradCheckReport, Graph, NormStats, ParamStore, PoolMode, Result,
    Roi, RowReduce, Tensor, Var,
};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Checks `build(inputs)` with every input trainable. The output is reduced
/// through a fixed positive random projection so each entry matters.
fn check_with<F>(shapes: &[&[usize]], seed: u64, opts: &GradCheckOptions, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("x{i}"), random(s, &mut rng)))
        .collect();
    grad_check(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let out = build(&mut g, &vars)?;
            let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let w = Tensor::from_fn(g.shape(out), |_| prng.gen_range(0.5..1.5));
            let wv = g.input(&w);
            let prod = g.mul(out, wv)?;
            let loss = g.sum_all(prod);
            Ok((g, loss))
        },
        opts,
    )
    .unwrap()
}

fn check<F>(name: &str, shapes: &[&[usize]], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..3 {
        let r = check_with(shapes, seed, &GradCheckOptions::default(), &build);
        assert!(r.passed, "{name} seed {seed}: {r:?}");
        assert!(r.checked > 0);
    }
}

#[test]
fn elementwise_ops() {
    check("add", &[&[3, 2], &[3, 2]], |g, v| g.add(v[0], v[1]));
    check("sub", &[&[3, 2], &[3, 2]], |g, v| g.sub(v[0], v[1]));
    check("mul", &[&[4], &[4]], |g, v| g.mul(v[0], v[1]));
    check("square", &[&[4]], |g, v| g.mul(v[0], v[0]));
    check("affine", &[&[5]], |g, v| Ok(g.affine(v[0], -1.5, 0.25)));
    check("sigmoid", &[&[2, 3]], |g, v| Ok(g.sigmoid(v[0])));
    check("relu", &[&[2, 3]], |g, v| Ok(g.relu(v[0])));
    check("softmax", &[&[2, 4]], |g, v| g.softmax_last(v[0]));
    check("log_softmax", &[&[3, 5]], |g, v| g.log_softmax_last(v[0]));
}

#[test]
fn linear_and_matmul() {
    check("linear", &[&[3, 4], &[2, 4], &[2]], |g, v| g.linear(v[0], v[1], Some(v[2])));
    check("linear-vec", &[&[4], &[3, 4], &[3]], |g, v| g.linear(v[0], v[1], Some(v[2])));
    check("matmul", &[&[2, 3], &[3, 4]], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn conv2d_strided_padded() {
    check("conv2d", &[&[2, 2, 5, 4], &[3, 2, 3, 3], &[3]], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec { stride: 2, padding: 1 })
    });
    check("conv2d-1x1", &[&[3, 4, 2], &[2, 3, 1, 1], &[2]], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::default())
    });
}

#[test]
fn batch_norm_batch_and_fixed() {
    check("bn-2d", &[&[5, 3], &[3], &[3]], |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, NormStats::Batch)?.0)
    });
    check("bn-4d", &[&[2, 3, 2, 2], &[3], &[3]], |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, NormStats::Batch)?.0)
    });
    check("bn-fixed", &[&[4, 2], &[2], &[2]], |g, v| {
        let stats = NormStats::Fixed {
            mean: vec![0.1, -0.2],
            var: vec![0.5, 2.0],
        };
        Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, stats)?.0)
    });
}

#[test]
fn pooling() {
    check("gap", &[&[2, 3, 3, 2]], |g, v| g.pool_global(v[0], PoolMode::Avg));
    check("gmp", &[&[2, 3, 3, 2]], |g, v| g.pool_global(v[0], PoolMode::Max));
    let roi = Roi {
        top: 1,
        bottom: 3,
        left: 0,
        right: 2,
    };
    check("roi-avg", &[&[3, 4, 3]], |g, v| g.roi_pool(v[0], roi, PoolMode::Avg));
    check("roi-max", &[&[3, 4, 3]], |g, v| g.roi_pool(v[0], roi, PoolMode::Max));
}

#[test]
fn shape_and_reduce_ops() {
    check("reshape", &[&[2, 3]], |g, v| g.reshape(v[0], &[3, 2]));
    check("concat0", &[&[2, 3], &[1, 3]], |g, v| g.concat(&[v[0], v[1]], 0));
    check("concat1", &[&[2, 3], &[2, 2]], |g, v| g.concat(&[v[0], v[1]], 1));
    check("stack", &[&[3], &[3]], |g, v| g.stack(&[v[0], v[1]]));
    check("transpose", &[&[2, 3]], |g, v| g.transpose(v[0]));
    check("narrow", &[&[4, 3]], |g, v| g.narrow(v[0], 1, 1, 2));
    check("select", &[&[3, 2, 2]], |g, v| g.select(v[0], 2));
    check("sum_axis", &[&[2, 3, 2]], |g, v| g.sum_axis(v[0], 1));
    check("mean_axis", &[&[2, 3, 2]], |g, v| g.mean_axis(v[0], 0));
    check("sum_all", &[&[2, 3]], |g, v| Ok(g.sum_all(v[0])));
    check("mean_all", &[&[2, 3]], |g, v| Ok(g.mean_all(v[0])));
}

#[test]
fn metric_ops() {
    check("sq_diff", &[&[2, 3, 2, 2], &[3]], |g, v| g.sq_diff_channel(v[0], v[1]));
    check("pdist", &[&[4, 3]], |g, v| g.pairwise_dist(v[0], false));
    check("pdist-sq", &[&[4, 3]], |g, v| g.pairwise_dist(v[0], true));
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    check("masked-max", &[&[4, 3]], |g, v| g.masked_reduce_rows(v[0], &mask, RowReduce::Max));
    check("masked-min", &[&[4, 3]], |g, v| g.masked_reduce_rows(v[0], &mask, RowReduce::Min));
    check("gather", &[&[3, 4]], |g, v| g.gather_cols(v[0], &[3, 0, 2]));
}

#[test]
fn composite_chain() {
    check("chain", &[&[2, 3, 4, 4], &[3, 3, 3, 3], &[3], &[3], &[3]], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec { stride: 2, padding: 1 })?;
        let (y, _) = g.batch_norm(y, v[3], v[4], 1e-5, NormStats::Batch)?;
        let y = g.sigmoid(y);
        let p = g.pool_global(y, PoolMode::Max)?;
        g.log_softmax_last(p)
    });
}

#[test]
fn quadratic_form_is_tight() {
    let r = check_with(&[&[6]], 7, &GradCheckOptions::default(), |g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.affine(sq, 0.5, 1.0))
    });
    assert!(r.passed && r.max_rel_error < 1e-7, "{r:?}");
}

#[test]
fn corrupted_gradient_is_detected() {
    let opts = GradCheckOptions {
        corrupt: Some(1.01),
        ..Default::default()
    };
    let r = check_with(&[&[6]], 7, &opts, |g, v| g.mul(v[0], v[0]));
    assert!(!r.passed && r.max_rel_error > 5e-3, "{r:?}");
}

#[test]
fn backward_examples() {
    let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad();
    let mut g = Graph::<f64>::new();
    let xv = g.input(&x);
    let sq = g.mul(xv, xv).unwrap();
    let loss = g.sum_all(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(xv).unwrap(), &[2.0, -4.0, 1.0]);

    let unused = g.input(&Tensor::ones(&[2]).with_grad());
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(unused).unwrap(), &[0.0, 0.0]);

    let err = g.backward(sq).err().unwrap().to_string();
    assert!(err.contains("scalar"), "{err}");
}

#[test]
fn repeated_backward_accumulates() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::new(&[2], vec![1.0, 3.0]).unwrap());
    for _ in 0..2 {
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward_into(loss, &mut store).unwrap();
    }
    assert_eq!(store.get(id).grad().unwrap(), &[4.0, 12.0]);
}

#[test]
fn kink_within_one_step_needs_refinement() {
    let run = |refinements, corrupt| {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new(&[1], vec![3e-6]).unwrap());
        let opts = GradCheckOptions {
            refinements,
            corrupt,
            ..Default::default()
        };
        grad_check(
            &mut store,
            |s| {
                let mut g = Graph::new();
                let x = g.param(s, id);
                let r = g.relu(x);
                let loss = g.sum_all(r);
                Ok((g, loss))
            },
            &opts,
        )
        .unwrap()
    };
    let coarse = run(0, None);
    assert!(!coarse.passed && (coarse.worst.unwrap().numeric - 0.65).abs() < 1e-9);
    let refined = run(1, None);
    assert!(refined.passed && refined.refined == 1, "{refined:?}");
    assert!(!run(2, Some(1.01)).passed);
}
