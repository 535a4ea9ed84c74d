//! Tensor kernels against direct loop oracles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use regla::tensor::{self, Conv2dSpec};
use regla::{par, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k) = (a.dim(0), a.dim(1));
    let p = b.dim(1);
    Tensor::from_fn(&[m, p], |i| {
        let (r, c) = (i / p, i % p);
        (0..k).map(|j| a.at(&[r, j]) * b.at(&[j, c])).sum()
    })
}

fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    spec: Conv2dSpec,
) -> Tensor<f64> {
    let (cin, h, wd) = x.chw().unwrap();
    let (cout, cin_g, k) = (w.dim(0), w.dim(1), w.dim(2));
    let cout_g = cout / spec.groups;
    let oh = (h + 2 * spec.padding - k) / spec.stride + 1;
    let ow = (wd + 2 * spec.padding - k) / spec.stride + 1;
    assert_eq!(cin_g * spec.groups, cin);
    Tensor::from_fn(&[cout, oh, ow], |i| {
        let (o, rest) = (i / (oh * ow), i % (oh * ow));
        let (y, xo) = (rest / ow, rest % ow);
        let g = o / cout_g;
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for ci in 0..cin_g {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * spec.stride + ky) as isize - spec.padding as isize;
                    let ix = (xo * spec.stride + kx) as isize - spec.padding as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    acc +=
                        w.at(&[o, ci, ky, kx]) * x.at(&[g * cin_g + ci, iy as usize, ix as usize]);
                }
            }
        }
        acc
    })
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for (m, k, p) in [(1, 1, 1), (3, 5, 2), (17, 33, 9), (64, 7, 65)] {
        let a = Tensor::<f64>::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[k, p], 1.0, &mut r);
        let got = tensor::matmul(&a, &b).unwrap();
        assert!(
            got.max_rel_diff(&naive_matmul(&a, &b)).unwrap() < 1e-12,
            "{m}×{k}×{p}"
        );
    }
    let a = Tensor::<f64>::zeros(&[2, 3]);
    assert!(tensor::matmul(&a, &a).is_err());
}

#[test]
fn conv_matches_direct_loop() {
    let mut r = rng(2);
    let cases = [
        (4, 6, 9, 3, Conv2dSpec::new(1, 1, 1)),
        (4, 4, 8, 3, Conv2dSpec::depthwise(4, 3)),
        (6, 6, 10, 5, Conv2dSpec::depthwise(6, 5)),
        (4, 8, 9, 3, Conv2dSpec::new(2, 1, 2)),
        (3, 5, 7, 1, Conv2dSpec::pointwise()),
        (3, 2, 8, 3, Conv2dSpec::new(2, 0, 1)),
    ];
    for (cin, cout, side, k, spec) in cases {
        let x = Tensor::<f64>::randn(&[cin, side, side], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[cout, cin / spec.groups, k, k], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[cout], 1.0, &mut r);
        let got = tensor::conv2d(&x, &w, Some(&b), spec).unwrap();
        let want = naive_conv(&x, &w, Some(&b), spec);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_rel_diff(&want).unwrap() < 1e-12, "{spec:?}");
    }
}

#[test]
fn softmax_rows_are_stable_distributions() {
    let x = Tensor::<f64>::new(&[2, 3], vec![1000.0, 1000.0, 1000.0, 0.0, 1.0, 2.0]).unwrap();
    let s = tensor::softmax_rows(&x).unwrap();
    assert!(s.is_finite());
    for r in 0..2 {
        let row: f64 = (0..3).map(|c| s.at(&[r, c])).sum();
        assert!((row - 1.0).abs() < 1e-12);
    }
    assert!((s.at(&[0, 0]) - 1.0 / 3.0).abs() < 1e-12);
    let e: Vec<f64> = [0.0f64, 1.0, 2.0].iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    assert!((s.at(&[1, 2]) - e[2] / z).abs() < 1e-12);
}

#[test]
fn pooling_and_upsampling() {
    let x = Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64);
    let p = tensor::adaptive_avg_pool(&x, 2, 2).unwrap();
    assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
    let u = tensor::upsample_nearest(&p, 2).unwrap();
    assert_eq!(u.shape(), &[1, 4, 4]);
    assert_eq!(u.at(&[0, 1, 1]), 2.5);
    assert_eq!(u.at(&[0, 3, 2]), 12.5);
    let back = tensor::adaptive_avg_pool(&u, 2, 2).unwrap();
    assert_eq!(back, p);
    let odd = Tensor::<f64>::from_fn(&[1, 3, 3], |i| i as f64);
    assert_eq!(
        tensor::adaptive_avg_pool(&odd, 1, 1).unwrap().data(),
        &[4.0]
    );
}

#[test]
fn layer_norm_over_channels() {
    let x = Tensor::<f64>::randn(&[5, 3, 4], 2.0, &mut rng(3)).map(|v| v + 3.0);
    let y = tensor::layer_norm(&x, 0).unwrap();
    for p in 0..12 {
        let col: Vec<f64> = (0..5).map(|c| y.data()[c * 12 + p]).collect();
        let mean = col.iter().sum::<f64>() / 5.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
}

#[test]
fn activation_identities() {
    for v in [-3.0f64, -0.5, 0.0, 0.25, 2.0] {
        let g = tensor::gelu_scalar(v) - tensor::gelu_scalar(-v);
        assert!((g - v).abs() < 1e-12, "gelu({v}) − gelu(−{v}) = {g}");
        let h = 1e-6;
        let fd = (tensor::gelu_scalar(v + h) - tensor::gelu_scalar(v - h)) / (2.0 * h);
        assert!((tensor::gelu_grad_scalar(v) - fd).abs() < 1e-8);
        let s = tensor::sigmoid_scalar(v);
        assert!((s + tensor::sigmoid_scalar(-v) - 1.0).abs() < 1e-12);
    }
    let x = Tensor::<f64>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(tensor::relu(&x).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn cosine_loss_fixtures() {
    let a = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let b = Tensor::<f64>::new(&[2, 2], vec![0.0, 3.0, 5.0, 0.0]).unwrap();
    assert!(tensor::cosine_loss(&a, &a).unwrap().abs() < 1e-12);
    assert!((tensor::cosine_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    assert!((tensor::cosine_loss(&a, &a.map(|v| -v)).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn shapes_are_checked() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[3, 2]);
    assert!(tensor::add(&a, &b).is_err());
    assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
    assert!(a.reshape(&[4]).is_err());
    let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
    let t = x.flatten_spatial().unwrap();
    assert_eq!(t.shape(), &[12, 2]);
    assert_eq!(t.at(&[5, 1]), x.at(&[1, 1, 1]));
    assert_eq!(t.unflatten_spatial(3, 4).unwrap(), x);
}

#[test]
fn parallel_helpers_match_sequential_loops() {
    let mut data = vec![0u64; 1003];
    par::for_each_chunk(&mut data, 10, |ci, chunk| {
        for (j, v) in chunk.iter_mut().enumerate() {
            *v = (ci * 10 + j) as u64 * 3;
        }
    });
    assert!(data.iter().enumerate().all(|(i, &v)| v == i as u64 * 3));
    let squares = par::map_indices(257, |i| i * i);
    assert_eq!(squares, (0..257).map(|i| i * i).collect::<Vec<_>>());

    let x = Tensor::<f32>::randn(&[8, 20, 20], 1.0, &mut rng(4));
    let w = Tensor::<f32>::randn(&[8, 1, 3, 3], 1.0, &mut rng(5));
    let spec = Conv2dSpec::depthwise(8, 3);
    let pooled = tensor::conv2d(&x, &w, None, spec).unwrap();
    let serial = par::single_threaded(|| tensor::conv2d(&x, &w, None, spec).unwrap());
    assert_eq!(pooled, serial);
}
