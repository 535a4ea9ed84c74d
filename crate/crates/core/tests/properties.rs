//! Property tests over randomized shapes and values.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use regla::attention::{reference::naive_relu_linear_attention, relu_linear_attention};
use regla::bench::{fit_loglog, relu_linear_flops, softmax_flops};
use regla::cli::ppm::Ppm;
use regla::distill::{cls_from_patches, cosine_loss, standardize_features};
use regla::model::weights::TensorFile;
use regla::Tensor;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let c = x.dim(1);
    Tensor::from_fn(x.shape(), |i| x.data()[perm[i / c] * c + i % c])
}

fn perm_from(seed: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn factored_attention_matches_quadratic(n in 1usize..=32, d in 1usize..=16, e in 1usize..=16, seed: u64) {
        let q = randn(&[n, d], seed);
        let k = randn(&[n, d], seed ^ 1);
        let v = randn(&[n, e], seed ^ 2);
        let fast = relu_linear_attention(&q, &k, &v, 1e-6).unwrap();
        let slow = naive_relu_linear_attention(&q, &k, &v, 1e-6).unwrap();
        prop_assert!(fast.max_rel_diff(&slow).unwrap() < 1e-10);
    }

    #[test]
    fn attention_outputs_stay_in_value_hull(n in 1usize..=24, d in 1usize..=8, seed: u64) {
        let q = randn(&[n, d], seed);
        let k = randn(&[n, d], seed ^ 1);
        let v = randn(&[n, 3], seed ^ 2);
        let y = relu_linear_attention(&q, &k, &v, 1e-6).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..n).map(|i| v.at(&[i, j])).collect();
            let lo = col.iter().copied().fold(0.0, f64::min);
            let hi = col.iter().copied().fold(0.0, f64::max);
            for i in 0..n {
                prop_assert!(y.at(&[i, j]) >= lo - 1e-9 && y.at(&[i, j]) <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn attention_permutation_symmetries(n in 2usize..=20, d in 1usize..=8, seed: u64) {
        let q = randn(&[n, d], seed);
        let k = randn(&[n, d], seed ^ 1);
        let v = randn(&[n, d], seed ^ 2);
        let base = relu_linear_attention(&q, &k, &v, 1e-6).unwrap();
        let p = perm_from(seed, n);
        let qp = relu_linear_attention(&permute_rows(&q, &p), &k, &v, 1e-6).unwrap();
        prop_assert!(qp.max_rel_diff(&permute_rows(&base, &p)).unwrap() < 1e-12);
        let kvp = relu_linear_attention(&q, &permute_rows(&k, &p), &permute_rows(&v, &p), 1e-6).unwrap();
        prop_assert!(kvp.max_rel_diff(&base).unwrap() < 1e-10);
    }

    #[test]
    fn standardization_moments(n in 2usize..=40, d in 1usize..=8, shift in -50.0f64..50.0, scale in 0.1f64..20.0, seed: u64) {
        let x = randn(&[n, d], seed).map(|v| v * scale + shift);
        let s = standardize_features(&x).unwrap();
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| s.at(&[i, j])).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-5);
        }
        let again = standardize_features(&x.map(|v| v * 3.0 - 7.0)).unwrap();
        prop_assert!(again.max_rel_diff(&s).unwrap() < 1e-6);
    }

    #[test]
    fn cosine_loss_range_and_scale_invariance(n in 1usize..=10, d in 1usize..=8, k in 0.01f64..100.0, seed: u64) {
        let a = randn(&[n, d], seed);
        let b = randn(&[n, d], seed ^ 9);
        let l = cosine_loss(&a, &b).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
        let scaled = cosine_loss(&a, &b.map(|v| v * k)).unwrap();
        prop_assert!((scaled - l).abs() < 1e-9);
    }

    #[test]
    fn pooled_summary_ignores_token_order(n in 1usize..=30, d in 1usize..=6, seed: u64) {
        let x = randn(&[n, d], seed);
        let p = perm_from(seed ^ 5, n);
        let a = cls_from_patches(&x).unwrap();
        let b = cls_from_patches(&permute_rows(&x, &p)).unwrap();
        prop_assert!(a.max_rel_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn tensor_file_round_trip(dims in proptest::collection::vec(1usize..5, 1..4), seed: u64) {
        let t = randn(&dims, seed).cast::<f32>();
        let mut file = TensorFile::new();
        file.push("a/b", &t);
        file.push("scalar", &Tensor::<f32>::scalar(1.5));
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        let back = TensorFile::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back.require("a/b").unwrap(), &t);
        prop_assert_eq!(back.names().collect::<Vec<_>>(), vec!["a/b", "scalar"]);
    }

    #[test]
    fn ppm_round_trip(w in 1usize..6, h in 1usize..6, seed: u64) {
        let rgb: Vec<u8> = randn(&[w * h * 3], seed).data().iter().map(|v| (v.abs() * 80.0) as u8).collect();
        let img = Ppm { width: w, height: h, maxval: 255, rgb };
        prop_assert_eq!(Ppm::parse(&img.encode()).unwrap(), img);
    }

    #[test]
    fn flop_formulas_scale_with_tokens(n in 1u64..100_000, d in 1u64..512) {
        prop_assert_eq!(relu_linear_flops(2 * n, d, d), 2 * relu_linear_flops(n, d, d));
        prop_assert_eq!(relu_linear_flops(n, d, d), 2 * n * d * d + 3 * n * d);
        let s = softmax_flops(n, d);
        prop_assert_eq!(softmax_flops(2 * n, d), 4 * s);
    }

    #[test]
    fn loglog_fit_recovers_power_laws(c in 1e-6f64..1.0, p in 0.5f64..3.0) {
        let pts: Vec<(f64, f64)> = [256.0, 1024.0, 4096.0, 16384.0].iter().map(|&n: &f64| (n, c * n.powf(p))).collect();
        let fit = fit_loglog(&pts).unwrap();
        prop_assert!((fit.slope - p).abs() < 1e-9);
        prop_assert!(fit.r2 > 1.0 - 1e-9);
    }
}
