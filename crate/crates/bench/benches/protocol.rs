use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use raptr_bench::{short_run, signed_qc};
use raptr_core::harness::{self, RunOptions};
use raptr_core::{certified_prefix, SchemeKind, Variant};

fn certified(c: &mut Criterion) {
    let votes: Vec<u32> = (0..67u32).map(|i| (i * 7) % 5).collect();
    c.bench_function("certified_prefix/67_votes", |b| b.iter(|| certified_prefix(black_box(votes.clone()), 34)));
}

fn qc_verify(c: &mut Criterion) {
    let mut group = c.benchmark_group("qc_verify");
    for scheme in [SchemeKind::Test, SchemeKind::Ed25519] {
        for f in [1, 3] {
            let (cfg, ring, qc) = signed_qc(scheme, f);
            group.bench_with_input(BenchmarkId::new(format!("{scheme:?}"), cfg.n), &qc, |b, qc| {
                b.iter(|| assert!(qc.verify(&cfg, &ring)))
            });
        }
    }
    group.finish();
}

fn simulate(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate_50_rounds");
    group.sample_size(10);
    for v in [Variant::Raptr, Variant::BaselineQs] {
        for f in [1, 3] {
            let sc = short_run(f, v, 50);
            group.bench_with_input(BenchmarkId::new(v.as_str(), sc.protocol.n), &sc, |b, sc| {
                b.iter(|| harness::run(sc, RunOptions::default()).expect("valid scenario"))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, certified, qc_verify, simulate);
criterion_main!(benches);
