use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use flakysieve::augment::{lex, mutate_source, MutationOp};
use flakysieve::evaluate::score;
use flakysieve::siamese::{backward, init_model};
use flakysieve_bench::{java_test, random_vectors};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(c: &mut Criterion) {
    let m = init_model(768, &[256], 128, 0).unwrap();
    let v = random_vectors(3, 768, 1);
    let mut g = c.benchmark_group("model");
    g.bench_function("encode_768_256_128", |b| {
        b.iter(|| m.encode(black_box(&v[0])).unwrap())
    });
    g.bench_function("triplet_backward_768_256_128", |b| {
        b.iter(|| backward(&m, black_box(&v[0]), &v[1], &v[2], 1.0).unwrap())
    });
    g.finish();
}

fn mutation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sources: Vec<String> = (0..32)
        .map(|i| java_test(&format!("t{i}"), &mut rng))
        .collect();
    let mut g = c.benchmark_group("augment");
    g.bench_function("lex_32_methods", |b| {
        b.iter(|| {
            sources
                .iter()
                .map(|s| lex(black_box(s)).unwrap().len())
                .sum::<usize>()
        })
    });
    g.bench_function("mutate_all_ops", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(3),
            |mut rng| {
                for s in &sources {
                    black_box(mutate_source(s, &MutationOp::ALL, &mut rng).unwrap());
                }
            },
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truths: Vec<u8> = (0..10_000).map(|_| rng.random_range(0..5)).collect();
    let preds: Vec<u8> = truths
        .iter()
        .map(|&t| {
            if rng.random_bool(0.8) {
                t
            } else {
                rng.random_range(0..5)
            }
        })
        .collect();
    c.bench_function("score_10k_5_classes", |b| {
        b.iter(|| score(black_box(&preds), &truths).unwrap())
    });
}

criterion_group!(benches, model, mutation, metrics);
criterion_main!(benches);
