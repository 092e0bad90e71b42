use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stride::fusion::{fuse, pool_and_project_tensor, FusionMode};
use stride::metrics::{crps_from_quantiles, mase};
use stride::student::{StudentConfig, StudentLm, Vocabulary};
use stride::synth::quantize;
use stride::tensor::{pinball, Graph, Tensor};
use stride::tsfm::{ForecastModel, Layout, Normalization, QuantileForecast, QuantileLevels, TsfmConfig};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0..5.0f64, cols), rows)
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn forecaster(seed: u64, horizon: usize) -> ForecastModel {
    let cfg = TsfmConfig {
        d_model: 8,
        ff_hidden: 8,
        patch_len: 4,
        max_patches: 8,
        horizon,
        ..TsfmConfig::default()
    };
    ForecastModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn unit_norm(v: usize) -> Normalization {
    Normalization {
        mean: vec![0.0; v],
        std: vec![1.0; v],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in matrix(3, 5), shift in -50.0..50.0f64) {
        let mut g = Graph::new();
        let a = g.leaf(&tensor(&x));
        let sa = g.softmax_rows(a).unwrap();
        let shifted: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let b = g.leaf(&tensor(&shifted));
        let sb = g.softmax_rows(b).unwrap();
        for (i, row) in g.value(sa).chunks(5).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (p, q) in row.iter().zip(&g.value(sb)[i * 5..i * 5 + 5]) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mean_over_rows_ignores_row_order(x in matrix(6, 3), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
        let mut g = Graph::new();
        let a = g.leaf(&tensor(&x));
        let b = g.leaf(&tensor(&permuted));
        let ma = g.mean_over_rows(a).unwrap();
        let mb = g.mean_over_rows(b).unwrap();
        for (p, q) in g.value(ma).iter().zip(g.value(mb)) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn repeated_backward_is_bit_identical(x in matrix(3, 4), w in matrix(4, 2)) {
        let mut g = Graph::new();
        let xv = g.leaf(&tensor(&x).with_grad());
        let wv = g.leaf(&tensor(&w).with_grad());
        let h = g.matmul(xv, wv).unwrap();
        let t = g.tanh(h);
        let s = g.softmax_rows(t).unwrap();
        let n = g.layer_norm(s).unwrap();
        let sq = g.mul(n, t).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let first = (g.grad(xv).unwrap().to_vec(), g.grad(wv).unwrap().to_vec());
        g.zero_grads();
        g.backward(loss).unwrap();
        prop_assert_eq!(first.0.as_slice(), g.grad(xv).unwrap());
        prop_assert_eq!(first.1.as_slice(), g.grad(wv).unwrap());
    }

    #[test]
    fn pinball_charges_under_prediction_more_above_median(q in 0.51..0.99f64, delta in 1e-3..10.0f64) {
        // residual y − ŷ > 0 is an under-prediction
        prop_assert!(pinball(q, delta) > pinball(q, -delta));
        prop_assert!((pinball(q, delta) - q * delta).abs() < 1e-12);
        prop_assert!((pinball(q, -delta) - (1.0 - q) * delta).abs() < 1e-12);
    }

    #[test]
    fn decoded_forecasts_are_monotone(seed in 0u64..1000, x in prop::collection::vec(-10.0..10.0f64, 5..30)) {
        let m = forecaster(seed, 3);
        let ctx: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let f = m.forecast(&ctx).unwrap();
        for step in f.values() {
            for cell in step {
                prop_assert!(cell.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn forecasts_are_affine_equivariant(
        seed in 0u64..1000,
        x in prop::collection::vec(-3.0..3.0f64, 8..24),
        a in 0.1..20.0f64,
        b in -50.0..50.0f64,
    ) {
        let m = forecaster(seed, 2);
        let ctx: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let moved: Vec<Vec<f64>> = x.iter().map(|&v| vec![a * v + b]).collect();
        let f = m.forecast(&ctx).unwrap();
        let fm = m.forecast(&moved).unwrap();
        for (s, t) in f.values().iter().zip(fm.values()) {
            for (p, q) in s[0].iter().zip(&t[0]) {
                prop_assert!((a * p + b - q).abs() <= 1e-6 * (1.0 + q.abs()), "{} vs {}", a * p + b, q);
            }
        }
    }

    #[test]
    fn pooling_is_linear(h1 in matrix(4, 3), h2 in matrix(4, 3), w in matrix(3, 2), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let w = tensor(&w);
        let mix: Vec<Vec<f64>> = h1.iter().zip(&h2)
            .map(|(r, s)| r.iter().zip(s).map(|(u, v)| a * u + b * v).collect())
            .collect();
        let out = pool_and_project_tensor(&tensor(&mix), &w).unwrap();
        let o1 = pool_and_project_tensor(&tensor(&h1), &w).unwrap();
        let o2 = pool_and_project_tensor(&tensor(&h2), &w).unwrap();
        for ((o, p), q) in out.data().iter().zip(o1.data()).zip(o2.data()) {
            prop_assert!((o - (a * p + b * q)).abs() <= 1e-9);
        }
    }

    #[test]
    fn fusion_lengths(v in 1usize..4, block in 1usize..6, d in 1usize..5) {
        let layout = Layout { n_variates: v, block_len: block };
        for mode in [FusionMode::Prefix, FusionMode::Substitute] {
            let mut g = Graph::new();
            let e_ts = g.leaf(&Tensor::zeros(&[v * block, d]));
            let e_r = g.leaf(&Tensor::zeros(&[d]));
            let tags: Vec<_> = (0..v).map(|_| g.leaf(&Tensor::zeros(&[d]))).collect();
            let (out, l) = fuse(&mut g, e_r, e_ts, layout, mode, &tags).unwrap();
            let want = match mode {
                FusionMode::Prefix => v * block + v,
                FusionMode::Substitute => v * block,
            };
            prop_assert_eq!(g.shape(out)[0], want);
            prop_assert_eq!(l.rows(), want);
        }
    }

    #[test]
    fn crps_is_non_negative_and_zero_only_at_the_truth(
        cells in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 9), 1..6),
        y in prop::collection::vec(-5.0..5.0f64, 6),
    ) {
        let h = cells.len();
        let levels = QuantileLevels::default();
        let y: Vec<Vec<f64>> = y[..h].iter().map(|&v| vec![v]).collect();
        let f = QuantileForecast::new(cells.into_iter().map(|c| vec![c]).collect(), levels.clone(), unit_norm(1)).unwrap();
        prop_assert!(crps_from_quantiles(&f, &y).unwrap() >= 0.0);
        let exact = QuantileForecast::new(y.iter().map(|r| vec![vec![r[0]; 9]]).collect(), levels, unit_norm(1)).unwrap();
        prop_assert_eq!(crps_from_quantiles(&exact, &y).unwrap(), 0.0);
    }

    #[test]
    fn mase_is_affine_invariant(
        hist in prop::collection::vec(-5.0..5.0f64, 4..20),
        y in prop::collection::vec(-5.0..5.0f64, 3),
        point in prop::collection::vec(-5.0..5.0f64, 3),
        a in 0.01..100.0f64,
        b in -100.0..100.0f64,
    ) {
        let col = |v: &[f64], a: f64, b: f64| v.iter().map(|&x| vec![a * x + b]).collect::<Vec<_>>();
        let base = mase(&col(&point, 1.0, 0.0), &col(&y, 1.0, 0.0), &col(&hist, 1.0, 0.0), 1).unwrap();
        prop_assume!(!base.degenerate);
        let moved = mase(&col(&point, a, b), &col(&y, a, b), &col(&hist, a, b), 1).unwrap();
        prop_assert!((base.value - moved.value).abs() <= 1e-9 * (1.0 + base.value));
    }

    #[test]
    fn student_logits_are_causal(
        seed in 0u64..1000,
        prompt in prop::collection::vec(0usize..20, 2..12),
        cut in 0usize..11,
        replacement in 0usize..20,
    ) {
        let vocab = Vocabulary::new(8, 2, 2);
        let cfg = StudentConfig { d_model: 8, ff_hidden: 8, max_len: 16, ..StudentConfig::default() };
        let lm = StudentLm::new(cfg, vocab, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let cut = cut % prompt.len();
        let mut changed = prompt.clone();
        for t in &mut changed[cut + 1..] {
            *t = replacement;
        }
        let a = lm.logits(&prompt, true).unwrap();
        let b = lm.logits(&changed, true).unwrap();
        let width = a.shape()[1];
        prop_assert_eq!(&a.data()[..(cut + 1) * width], &b.data()[..(cut + 1) * width]);
    }

    #[test]
    fn quantized_bins_stay_in_range(v in -1e6..1e6f64, lo in -10.0..10.0f64, span in 0.0..10.0f64, bins in 1usize..32) {
        prop_assert!(quantize(v, lo, lo + span, bins) < bins);
    }
}
