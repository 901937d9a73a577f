use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rearec::evaluation::rank_items;
use rearec::reasoning::{reason, reason_uncached};
use rearec_bench::{model, prefix};

fn reasoning_steps(c: &mut Criterion) {
    let (params, cfg) = model(1000, 64, 2, 2, 50, 4);
    let seq = prefix(cfg.num_items, 50, 1);
    let mut group = c.benchmark_group("reason");
    for k in 0..=cfg.k_max {
        group.bench_with_input(BenchmarkId::new("cached", k), &k, |b, &k| {
            b.iter(|| reason(&seq, k, &params, &cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("uncached", k), &k, |b, &k| {
            b.iter(|| reason_uncached(&seq, k, &params, &cfg).unwrap())
        });
    }
    group.finish();
}

fn ranking(c: &mut Criterion) {
    let (params, cfg) = model(10_000, 64, 1, 2, 50, 1);
    let seq = prefix(cfg.num_items, 50, 2);
    let h = reason(&seq, 1, &params, &cfg).unwrap().states.pop().unwrap();
    c.bench_function("rank_items/10k", |b| b.iter(|| rank_items(&h, &params.item_emb)));
}

criterion_group!(benches, reasoning_steps, ranking);
criterion_main!(benches);
