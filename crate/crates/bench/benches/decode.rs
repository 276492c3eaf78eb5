use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use retrospec_bench::{sources, toy_model, verify_cases};
use retrospec_core::decode::{generate, verify_draft, DecodeConfig, EchoHeads, Strategy};

fn verification(c: &mut Criterion) {
    let cases = verify_cases(256, 64, 20, 1);
    c.bench_function("verify_draft/256x20", |b| {
        b.iter(|| {
            for (probs, draft) in &cases {
                black_box(verify_draft(probs, draft, 0.9975));
            }
        })
    });
}

fn strategies(c: &mut Criterion) {
    let model = toy_model(24, 8);
    let echo = EchoHeads::new(&model, 8);
    let batch = sources(4, 24, 20, 2);
    let mut group = c.benchmark_group("generate/K5");
    group.sample_size(10);
    for strategy in [Strategy::Bs, Strategy::BsOpt, Strategy::Msbs] {
        let config = DecodeConfig {
            strategy,
            beam_size: 5,
            max_len: 24,
            draft_len: 8,
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::new("trained-heads", strategy), &config, |b, config| {
            b.iter(|| generate(&model, &batch, config).expect("decodes"))
        });
        if strategy == Strategy::Msbs {
            group.bench_with_input(BenchmarkId::new("echo-heads", strategy), &config, |b, config| {
                b.iter(|| generate(&echo, &batch, config).expect("decodes"))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, verification, strategies);
criterion_main!(benches);
