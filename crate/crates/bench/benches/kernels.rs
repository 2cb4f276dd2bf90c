use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use bimu_bench::{mnist_spec, random_input, random_posterior};
use bimu_core::binnet::{forward, grad_lambda_mc_batch, mc_predictive, GradWorkspace};
use bimu_core::rules::{bimu_step, BiMUConfig};
use bimu_core::uncertainty::{roc_auc, score};
use bimu_core::RngStream;

fn kernels(c: &mut Criterion) {
    let spec = mnist_spec();
    let post = random_posterior(&spec, 1.0, 7);
    let x = random_input(784, 3);

    let weights = post.sample_hard(&mut RngStream::new(1, 1));
    c.bench_function("forward_784_100_10", |b| {
        b.iter(|| forward(&spec, black_box(&weights), None, black_box(&x)))
    });

    c.bench_function("sample_relaxed", |b| {
        let mut rng = RngStream::new(2, 2);
        b.iter(|| post.sample_relaxed(1.0, &mut rng))
    });

    let mut ws = GradWorkspace::new(&spec);
    c.bench_function("grad_lambda_mc_k5", |b| {
        let mut rng = RngStream::new(3, 3);
        b.iter(|| grad_lambda_mc_batch(&spec, &post, None, &[x.as_slice()], &[4], 5, 1.0, &mut rng, &mut ws))
    });

    let grad = grad_lambda_mc_batch(&spec, &post, None, &[x.as_slice()], &[4], 5, 1.0, &mut RngStream::new(4, 4), &mut ws);
    let cfg = BiMUConfig::pmnist();
    c.bench_function("bimu_step", |b| {
        b.iter_batched(
            || post.clone(),
            |mut p| bimu_step(&mut p, &grad, &cfg).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });

    c.bench_function("mc_predictive_k10_and_score", |b| {
        let mut rng = RngStream::new(5, 5);
        b.iter(|| score(&mc_predictive(&spec, &post, None, &x, 10, &mut rng)))
    });

    let mut rng = RngStream::new(6, 6);
    let a: Vec<f64> = (0..1000).map(|_| rng.uniform01()).collect();
    let o: Vec<f64> = (0..1000).map(|_| rng.uniform01() + 0.2).collect();
    c.bench_function("roc_auc_1000x1000", |b| b.iter(|| roc_auc(black_box(&a), black_box(&o), 1000)));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = kernels
}

fn primitives(c: &mut Criterion) {
    let v: Vec<f64> = (0..79_400).map(|i| (i as f64 / 79_400.0) * 6.0 - 3.0).collect();
    c.bench_function("uniform01_x79400", |b| {
        let mut rng = RngStream::new(9, 9);
        b.iter(|| {
            let mut s = 0.0;
            for _ in 0..79_400 {
                s += rng.uniform01();
            }
            s
        })
    });
    c.bench_function("fast_uniform01_x79400", |b| {
        let mut rng = RngStream::new(9, 9).fast();
        b.iter(|| {
            let mut s = 0.0;
            for _ in 0..79_400 {
                s += rng.uniform01();
            }
            s
        })
    });
    c.bench_function("tanh_fast_x79400", |b| {
        b.iter(|| black_box(&v).iter().map(|&x| bimu_core::numkit::tanh_fast(x)).sum::<f64>())
    });
    c.bench_function("tanh_x79400", |b| b.iter(|| black_box(&v).iter().map(|x| x.tanh()).sum::<f64>()));
    c.bench_function("exp_x79400", |b| b.iter(|| black_box(&v).iter().map(|x| x.exp()).sum::<f64>()));
    c.bench_function("div_x79400", |b| b.iter(|| black_box(&v).iter().map(|x| 1.0 / (x + 7.0)).sum::<f64>()));
}

criterion_group!(micro, primitives);
criterion_main!(benches, micro);
