use proptest::prelude::*;
use rapa_tensor::{io, Conv2dSpec, Graph, NormStats, PoolMode, Roi, Tensor};

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #[test]
    fn max_pool_dominates_avg_pool(v in values(2 * 3 * 4)) {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(&[2, 3, 4], v).unwrap());
        let mx = g.pool_global(x, PoolMode::Max).unwrap();
        let av = g.pool_global(x, PoolMode::Avg).unwrap();
        for (m, a) in g.value(mx).iter().zip(g.value(av)) {
            prop_assert!(m >= a);
        }
        for mode in [PoolMode::Max, PoolMode::Avg] {
            let r = g.roi_pool(x, Roi::full(3, 4), mode).unwrap();
            let p = g.pool_global(x, mode).unwrap();
            prop_assert_eq!(g.value(r), g.value(p));
        }
    }

    #[test]
    fn sigmoid_and_softmax_ranges(v in values(12)) {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(&[3, 4], v).unwrap());
        let s = g.sigmoid(x);
        prop_assert!(g.value(s).iter().all(|&y| y > 0.0 && y < 1.0));
        let sm = g.softmax_last(x).unwrap();
        for row in g.value(sm).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_conv_is_identity(v in values(3 * 4 * 5)) {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(&[3, 4, 5], v).unwrap());
        let k = g.input(&Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let b = g.input(&Tensor::zeros(&[3]));
        let y = g.conv2d(x, k, Some(b), Conv2dSpec::default()).unwrap();
        prop_assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn batch_norm_standardizes(v in values(6 * 2), shift in -5.0f64..5.0) {
        let spread = v.iter().step_by(2).fold(f64::MIN, |a, &b| a.max(b))
            - v.iter().step_by(2).fold(f64::MAX, |a, &b| a.min(b));
        prop_assume!(spread > 0.5);
        let data: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(&[6, 2], data).unwrap());
        let ga = g.input(&Tensor::ones(&[2]));
        let be = g.input(&Tensor::zeros(&[2]));
        let (y, _) = g.batch_norm(x, ga, be, 1e-5, NormStats::Batch).unwrap();
        let col: Vec<f64> = g.value(y).iter().step_by(2).copied().collect();
        let mean = col.iter().sum::<f64>() / 6.0;
        let var = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 6.0;
        prop_assert!(mean.abs() < 1e-6);
        prop_assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn tensor_file_round_trip(dims in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
        let t32 = Tensor::<f32>::from_fn(&dims, |i| (i as f32 + seed as f32 * 1e-3).sin());
        let back: Tensor<f32> = io::decode(&io::encode(&t32)).unwrap();
        prop_assert_eq!(back.data(), t32.data());
        prop_assert_eq!(back.shape(), t32.shape());
        let t64 = t32.cast::<f64>();
        let back: Tensor<f64> = io::decode(&io::encode(&t64)).unwrap();
        prop_assert_eq!(back.data(), t64.data());
    }
}

#[test]
fn file_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.rapt");
    let t = Tensor::<f32>::from_fn(&[2, 3, 4, 5], |i| (i as f32).cos() * 1e-3);
    io::save(&t, &path).unwrap();
    let back: Tensor<f32> = io::load(&path).unwrap();
    assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.input(&Tensor::from_fn(&[2, 3, 8, 6], |i| ((i * 2654435761usize) % 1000) as f32 / 500.0 - 1.0));
        let k = g.input(&Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 40503) % 17) as f32 / 17.0 - 0.5));
        let y = g.conv2d(x, k, None, Conv2dSpec { stride: 2, padding: 1 }).unwrap();
        g.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
