use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cor_core::metrics::{m_dice, MetricSet};
use cor_core::numerics::{Conv2dSpec, Graph, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).with_requires_grad(true)
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("conv2d_fwd_bwd");
    for (name, groups, cin, cout) in [("dense_3x3", 1, 16, 16), ("depthwise_3x3", 16, 16, 16)] {
        let x = random(&[32, 32, cin], &mut rng);
        let w = random(&[3, 3, cin / groups, cout], &mut rng);
        let b = random(&[cout], &mut rng);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (xv, wv, bv) = (g.leaf(x.clone()).unwrap(), g.leaf(w.clone()).unwrap(), g.leaf(b.clone()).unwrap());
                let y = g.conv2d(xv, wv, bv, Conv2dSpec { groups, stride: 1, padding: 1 }).unwrap();
                let s = g.sum(y).unwrap();
                g.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn dense(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[64, 64], &mut rng);
    let b = random(&[64, 64], &mut rng);
    c.bench_function("matmul_64_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (av, bv) = (g.leaf(a.clone()).unwrap(), g.leaf(b.clone()).unwrap());
            let y = g.matmul(av, bv).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap()
        })
    });

    let x = random(&[16, 16, 64], &mut rng);
    let gamma = Tensor::from_fn(&[64], |_| 1.0).with_requires_grad(true);
    let beta = Tensor::zeros(&[64]).with_requires_grad(true);
    c.bench_function("layer_norm_16x16x64_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone()).unwrap();
            let (gv, bv) = (g.leaf(gamma.clone()).unwrap(), g.leaf(beta.clone()).unwrap());
            let y = g.layer_norm(xv, gv, bv, 1e-6).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pred: Vec<f64> = (0..64 * 64).map(|_| rng.random()).collect();
    let gt: Vec<f64> = (0..64 * 64).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
    c.bench_function("m_dice_64x64", |bench| bench.iter(|| m_dice(&pred, &gt).unwrap()));
    c.bench_function("metric_set_64x64", |bench| bench.iter(|| MetricSet::of_sample(&pred, &gt).unwrap()));
}

criterion_group!(benches, conv, dense, metrics);
criterion_main!(benches);
