use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secap_core::eval::{cmc_map, Meta};
use secap_core::kernels::gemm_nn;
use secap_core::model::{ModelConfig, SeCap};
use secap_core::Tensor;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm_nn");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [64, 128, 256] {
        let a: Vec<f32> = (0..n * n).map(|_| rng.random()).collect();
        let b: Vec<f32> = (0..n * n).map(|_| rng.random()).collect();
        let mut out = vec![0.0f32; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| {
                out.fill(0.0);
                gemm_nn(n, n, n, &a, &b, &mut out);
            })
        });
    }
    group.finish();
}

fn encoder_forward(c: &mut Criterion) {
    let cfg = ModelConfig::toy(32, 2);
    let (model, store) = SeCap::new::<f32>(&cfg, 0).unwrap();
    let e = &cfg.encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [16, e.channels, e.image_height, e.image_width];
    let pixels = (0..shape.iter().product::<usize>()).map(|_| rng.random()).collect();
    let images = Tensor::<f32>::new(&shape, pixels).unwrap();
    c.bench_function("features toy batch 16", |b| b.iter(|| model.features(&store, &images).unwrap()));
}

fn ranking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (nq, ng) = (100, 1000);
    let meta = |rng: &mut ChaCha8Rng| Meta {
        id: rng.random_range(0..50),
        camera: rng.random_range(0..4),
    };
    let q: Vec<Meta> = (0..nq).map(|_| meta(&mut rng)).collect();
    let g: Vec<Meta> = (0..ng).map(|_| meta(&mut rng)).collect();
    let dist: Vec<f64> = (0..nq * ng).map(|_| rng.random()).collect();
    c.bench_function("cmc_map 100x1000", |b| b.iter(|| cmc_map(&dist, &q, &g).unwrap()));
}

criterion_group!(benches, matmul, encoder_forward, ranking);
criterion_main!(benches);
