use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use vocabflow::graph::Graph;
use vocabflow::sampler::{ar_reconstruct, SamplerConfig};
use vocabflow::Tokenizer;
use vocabflow_bench::{bench_config, random_matrix, test_image};

fn matmul(c: &mut Criterion) {
    let a = random_matrix(128, 128, 1);
    let b = random_matrix(128, 128, 2);
    c.bench_function("matmul_128", |bench| {
        bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
}

fn softmax(c: &mut Criterion) {
    let x = random_matrix(16, 1024, 3);
    c.bench_function("softmax_16x1024", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let v = g.constant(x.clone());
            let s = g.softmax(v).unwrap();
            black_box(g.value(s).data()[0])
        })
    });
}

fn tokenizer(c: &mut Criterion) {
    let cfg = bench_config();
    let model = Tokenizer::<f32>::new(cfg.clone()).unwrap();
    let img = test_image(cfg.image_size, 4);
    c.bench_function("tokenize_32", |bench| {
        bench.iter(|| model.tokenize(black_box(&img)).unwrap())
    });
    let tokens = model.tokenize(&img).unwrap();
    let sampler = SamplerConfig {
        ar_steps: 4,
        ode_steps: 10,
        ..SamplerConfig::from_config(&cfg)
    };
    let mut group = c.benchmark_group("decode");
    group.sample_size(10);
    group.bench_function("ar_reconstruct_32", |bench| {
        bench.iter(|| ar_reconstruct(&model, black_box(&tokens), &sampler).unwrap())
    });
    group.finish();
}

criterion_group!(benches, matmul, softmax, tokenizer);
criterion_main!(benches);
