//! Kernel throughput: the data-parallel pool against a single-threaded run,
//! and linear against softmax attention.
//!
//! Build with `--no-default-features` to measure the purely sequential path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use regla::attention::{relu_linear_attention, softmax_attention, DEFAULT_EPS};
use regla::bench::bench_inputs;
use regla::model::{Model, ModelConfig, Variant};
use regla::tensor::{self, Conv2dSpec};
use regla::{par, Tensor};

type Case<'a> = (&'static str, Box<dyn Fn() -> Tensor<f32> + Sync + 'a>);

fn pool_vs_single(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(&[96, 56, 56], 1.0, &mut rng);
    let dw = Tensor::<f32>::randn(&[96, 1, 7, 7], 0.1, &mut rng);
    let pw = Tensor::<f32>::randn(&[192, 96, 1, 1], 0.1, &mut rng);
    let a = Tensor::<f32>::randn(&[256, 256], 1.0, &mut rng);

    let mut g = c.benchmark_group("pool_vs_single");
    let cases: [Case; 3] = [
        (
            "dwconv7",
            Box::new(|| tensor::conv2d(&x, &dw, None, Conv2dSpec::depthwise(96, 7)).unwrap()),
        ),
        (
            "pwconv",
            Box::new(|| tensor::conv2d(&x, &pw, None, Conv2dSpec::pointwise()).unwrap()),
        ),
        ("matmul256", Box::new(|| tensor::matmul(&a, &a).unwrap())),
    ];
    for (name, f) in &cases {
        g.bench_function(BenchmarkId::new(*name, "pool"), |b| {
            b.iter(|| black_box(f()))
        });
        g.bench_function(BenchmarkId::new(*name, "single"), |b| {
            b.iter(|| par::single_threaded(|| black_box(f())))
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention_d64");
    g.sample_size(10);
    for n in [256usize, 1024, 4096] {
        let (q, k, v) = bench_inputs(n, 64, 0);
        g.bench_with_input(BenchmarkId::new("relu_linear", n), &n, |b, _| {
            b.iter(|| black_box(relu_linear_attention(&q, &k, &v, DEFAULT_EPS as f32).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("softmax", n), &n, |b, _| {
            b.iter(|| black_box(softmax_attention(&q, &k, &v).unwrap()))
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let model = Model::<f32>::build(&ModelConfig::variant(Variant::T), 0).unwrap();
    let x = Tensor::<f32>::randn(&[3, 224, 224], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let mut g = c.benchmark_group("forward_T_224");
    g.sample_size(10);
    g.bench_function("pool", |b| b.iter(|| black_box(model.forward(&x).unwrap())));
    g.bench_function("single", |b| {
        b.iter(|| par::single_threaded(|| black_box(model.forward(&x).unwrap())))
    });
    g.finish();
}

criterion_group!(benches, pool_vs_single, attention, forward);
criterion_main!(benches);
