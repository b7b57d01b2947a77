use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use metaadapter_bench::bench_task;
use metaadapter_core::adapter::{backward, refine};
use metaadapter_core::tip::{tip_logits, CacheModel, TipParams};
use metaadapter_core::zeroshot::zeroshot_logits;
use metaadapter_core::{AdapterConfig, AdapterParams, RngSeed};

fn heads(c: &mut Criterion) {
    let t = bench_task(100, 16, 512, 256, 1);
    let cache = CacheModel::from_support(&t.support).unwrap();
    let tip = TipParams::new(1.0, 5.5).unwrap();
    let mut g = c.benchmark_group("heads");
    g.bench_function("zeroshot_n100_d512_q256", |b| b.iter(|| zeroshot_logits(black_box(&t.queries), &t.classes).unwrap()));
    g.bench_function("tip_n100_k16_d512_q256", |b| b.iter(|| tip_logits(black_box(&t.queries), &t.classes, &cache, tip).unwrap()));
    g.finish();
}

fn adapter(c: &mut Criterion) {
    let mut g = c.benchmark_group("adapter");
    g.sample_size(10);
    for dim in [256, 1024] {
        let t = bench_task(32, 16, dim, 64, 2);
        let p = AdapterParams::init(&AdapterConfig::new(dim), RngSeed(0)).unwrap();
        g.bench_with_input(BenchmarkId::new("refine_n32_k16", dim), &dim, |b, _| {
            b.iter(|| refine(black_box(&t.classes), &t.support, &p).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("backward_n32_k16_q64", dim), &dim, |b, _| {
            b.iter(|| backward(black_box(&t.queries), &t.labels, &t.classes, &t.support, &p, 100.0).unwrap())
        });
    }
    g.finish();
}

fn matmul(c: &mut Criterion) {
    let t = bench_task(256, 1, 1024, 256, 3);
    let (a, b) = (t.queries.cast::<f64>(), t.classes.cast::<f64>());
    c.bench_function("matmul_transposed_256x1024x256", |bench| {
        bench.iter(|| black_box(&a).matmul_transposed(&b).unwrap())
    });
}

criterion_group!(benches, heads, adapter, matmul);
criterion_main!(benches);
