//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 2 7`.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raptr_core::block::{is_prefix_of, BlockStore};
use raptr_core::cert::signing;
use raptr_core::crypto::{combine, generate_keys, verify_agg, Claim, SchemeKind};
use raptr_core::harness::{self, RunOptions};
use raptr_core::scenario::ScenarioConfig;
use raptr_core::sim::observer::ViolationKind;
use raptr_core::sim::{SimOptions, Simulation};
use raptr_core::{certified_prefix, Digest, Prefix, QuorumCertificate, ReplicaId, Variant};

fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"));
    ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

const ADVERSARIES: [&str; 5] =
    ["equivocating-leader", "byzantine-batch-sender", "silent", "stale-vote-replay", "pre-gst"];

fn safety_campaign() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [4, 10] {
        for class in ADVERSARIES {
            let sc = scenario(&format!("{class}-n{n}"));
            let (summary, _) = harness::campaign(&sc, 0..1000, threads()).unwrap();
            let unsafe_runs: usize =
                summary.violations_by_kind.iter().filter(|(k, _)| k.is_safety()).map(|(_, c)| *c).sum();
            let ok = summary.runs == 1000 && unsafe_runs == 0 && summary.min_rounds >= 200;
            pass &= ok;
            parts.push(format!(
                "{class}-n{n}: {} runs, {unsafe_runs} safety violations, {} liveness failures, min round {}",
                summary.runs, summary.failed, summary.min_rounds
            ));
        }
    }
    outcome(pass, parts.join("; "))
}

fn hop_counts() -> Outcome {
    let sc = scenario("fault-free-n4");
    let opts = RunOptions { hop_count_mode: true, trace: false };
    let hops = |v: Variant| {
        let (report, _) = harness::run(&sc.clone().with_variant(v), opts).unwrap();
        assert!(report.passed(), "{v:?}: {:?}", report.violations);
        report.metrics.hop_counts.expect("hop mode")
    };
    let raptr = hops(Variant::Raptr);
    let base = hops(Variant::BaselineQs);
    let consensus_exact = raptr.consensus.p25 == 3.0 && raptr.consensus.max == 3.0;
    let close = |x: f64, want: f64| (x - want).abs() <= 0.1;
    let gap = base.ordering.mean - raptr.ordering.mean;
    let pass = consensus_exact && close(raptr.ordering.mean, 5.0) && close(base.ordering.mean, 7.0) && close(gap, 2.0);
    outcome(
        pass,
        format!(
            "raptr consensus {:.3}..{:.3}, ordering {:.3} (inclusion {:.3}); baseline ordering {:.3}; gap {gap:.3} hops",
            raptr.consensus.p25, raptr.consensus.max, raptr.ordering.mean, raptr.inclusion.mean, base.ordering.mean
        ),
    )
}

fn cadence() -> Outcome {
    let sc = scenario("fault-free-n4");
    let step = 2 * sc.protocol.delta;
    let mut sim = Simulation::new(sc.clone(), SimOptions { trace: false, hop: Some(sc.protocol.delta) });
    let mut irregular = 0;
    let mut samples = 0;
    let mut prev = None;
    let mut t = step / 2;
    while t < sc.horizon.time {
        sim.run_until(t);
        let rounds: Vec<u64> = sc.protocol.replicas().map(|r| sim.replica(r).r_cur()).collect();
        if let Some(p) = prev {
            samples += 1;
            if rounds.iter().any(|r| *r != p + 1) {
                irregular += 1;
            }
        }
        prev = Some(rounds[0]);
        t += step;
    }
    let out = sim.finish();
    let inclusion = out.metrics.hop_counts.expect("hop mode").inclusion.mean;
    let pass = irregular == 0 && samples >= 500 && out.metrics.max_round >= 500 && (inclusion - 1.0).abs() <= 0.1;
    outcome(
        pass,
        format!(
            "{samples} intervals of 2 hops, {irregular} without exactly one new round; {} rounds; mean inclusion {inclusion:.3} hops",
            out.metrics.max_round
        ),
    )
}

fn liveness_bound() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [4, 10] {
        let sc = scenario(&format!("liveness-bound-n{n}"));
        assert!(sc.checks.commit_bound);
        let (summary, cex) = harness::campaign(&sc, 0..100, threads()).unwrap();
        let late = summary.violations_by_kind.get(&ViolationKind::CommitDeadline).copied().unwrap_or(0);
        pass &= summary.runs == 100 && summary.failed == 0;
        parts.push(format!("n={n}: {}/{} seeds pass, {late} late rounds", summary.passed, summary.runs));
        if let Some(cex) = cex {
            parts.push(format!("first failure: seed {} {}", cex.seed, cex.violation));
        }
    }
    outcome(pass, parts.join("; "))
}

struct GlitchRun {
    p50: f64,
    block_rate: f64,
    tc_rounds: usize,
}

fn glitch_run(name: &str, v: Variant, seed: u64) -> GlitchRun {
    let sc = scenario(name).with_variant(v).with_seed(seed);
    let (report, _) = harness::run(&sc, RunOptions::default()).unwrap();
    assert!(report.safety_ok, "{name} {v:?} seed {seed}");
    let m = report.metrics;
    GlitchRun { p50: m.ordering.p50, block_rate: m.block_rate, tc_rounds: m.tc_rounds }
}

fn robustness() -> Outcome {
    let base = scenario("glitch-free-n10");
    let seeds = base.seed..base.seed + base.seeds.unwrap_or(4);
    let (mut raptr_tc, mut raptr_slow, mut baby_drop) = (0, Vec::new(), Vec::new());
    let mut partial_dev: Vec<f64> = Vec::new();
    for seed in seeds.clone() {
        let free = glitch_run("glitch-free-n10", Variant::Raptr, seed);
        let full = glitch_run("full-glitch-n10", Variant::Raptr, seed);
        let part = glitch_run("partial-glitch-n10", Variant::Raptr, seed);
        raptr_tc += full.tc_rounds;
        raptr_slow.push(full.p50 / free.p50 - 1.0);
        partial_dev.push((part.p50 / free.p50 - 1.0).abs());

        let free = glitch_run("glitch-free-n10", Variant::BabyRaptr, seed);
        let full = glitch_run("full-glitch-n10", Variant::BabyRaptr, seed);
        let part = glitch_run("partial-glitch-n10", Variant::BabyRaptr, seed);
        baby_drop.push(free.block_rate / full.block_rate);
        partial_dev.push((part.p50 / free.p50 - 1.0).abs());
    }
    let max = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max);
    let min = |v: &[f64]| v.iter().copied().fold(f64::MAX, f64::min);
    let checks = [
        ("raptr zero TCs", raptr_tc == 0),
        ("raptr slowdown <= 25%", max(&raptr_slow) <= 0.25),
        ("baby block rate drop >= 2x", min(&baby_drop) >= 2.0),
        ("partial glitch p50 within 5%", max(&partial_dev) <= 0.05),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        format!(
            "seeds {seeds:?}: raptr TC rounds {raptr_tc}, p50 slowdown {:.1}%..{:.1}%; baby block rate drop {:.2}x..{:.2}x; partial p50 deviation <= {:.1}%{}",
            100.0 * min(&raptr_slow),
            100.0 * max(&raptr_slow),
            min(&baby_drop),
            max(&baby_drop),
            100.0 * max(&partial_dev),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

fn prefix_decoupling() -> Outcome {
    let sc = scenario("prefix-decoupling-n4");
    let m = sc.protocol.m();
    let run = |s: usize| {
        let mut sc = sc.clone();
        sc.protocol.availability = Some(s);
        let (report, _) = harness::run(&sc, RunOptions::default()).unwrap();
        assert!(report.safety_ok);
        let full_qcs = report.metrics.qc_prefix_histogram.get(&m).copied().unwrap_or(0);
        let full_commits = report.metrics.prefix_histogram.get(&m).copied().unwrap_or(0);
        (full_qcs, full_commits, report.metrics.qc_prefix_histogram)
    };
    let f = sc.protocol.f;
    let (qcs, commits, hist) = run(f + 1);
    let (strict_qcs, _, strict_hist) = run(2 * f + 1);
    outcome(
        qcs > 0 && commits > 0 && strict_qcs == 0,
        format!(
            "S={}: {qcs} full-prefix QCs, {commits} full blocks committed, QC prefixes {hist:?}; S={}: {strict_qcs} full-prefix QCs, QC prefixes {strict_hist:?}",
            f + 1,
            2 * f + 1
        ),
    )
}

/// Every sequence over `0..=max` of length `len`.
fn sequences(len: usize, max: Prefix) -> Vec<Vec<Prefix>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..=max).map(move |p| {
                    let mut s = s.clone();
                    s.push(p);
                    s
                })
            })
            .collect();
    }
    out
}

/// Labels every slot a QC's chain orders: `(block, 0)` for the PoA part,
/// then `(block, i)` for each included sub-block.
fn slot_labels(qc: &QuorumCertificate, store: &BlockStore) -> Option<Vec<(Digest, Prefix)>> {
    let mut elements = Vec::new();
    let (mut hash, mut prefix, mut round) = (qc.hash(), qc.prefix(), qc.round());
    while round > 0 {
        elements.push((hash, prefix));
        let parent = store.get(&hash)?.entry_reason().qc();
        (hash, prefix, round) = (parent.hash(), parent.prefix(), parent.round());
    }
    elements.reverse();
    Some(elements.into_iter().flat_map(|(b, p)| (0..=p).map(move |i| (b, i))).collect())
}

fn oracle_equivalence() -> Outcome {
    let mut vote_sets = 0;
    let mut mismatches = 0;
    for s in [2usize, 3] {
        for len in 0..=7 {
            for votes in sequences(len, 4) {
                vote_sets += 1;
                let got = certified_prefix(votes.iter().copied(), s).ok();
                let want = (len >= s).then(|| {
                    let mut v = votes.clone();
                    v.sort_unstable();
                    v[len - s]
                });
                mismatches += usize::from(got != want);
            }
        }
    }

    let (mut pairs, mut related, mut disagreements, mut runs) = (0usize, 0usize, 0usize, 0);
    for (name, horizon) in [("equivocating-leader-n4", 40_000), ("pre-gst-n4", 80_000)] {
        for seed in 0..50 {
            let mut sc = scenario(name).with_seed(seed);
            sc.horizon.time = horizon;
            let mut sim = Simulation::new(sc, SimOptions::default());
            sim.run();
            runs += 1;
            let store = sim.observer().store();
            let mut seen = HashSet::new();
            let qcs: Vec<Arc<QuorumCertificate>> = store
                .values()
                .map(|b| b.entry_reason().qc().clone())
                .filter(|qc| seen.insert((qc.hash(), qc.prefix(), qc.round())))
                .collect();
            let labels: Vec<_> = qcs.iter().map(|qc| slot_labels(qc, store)).collect();
            for (a, la) in qcs.iter().zip(&labels) {
                for (b, lb) in qcs.iter().zip(&labels) {
                    let (Some(la), Some(lb)) = (la, lb) else { continue };
                    let Ok(got) = is_prefix_of(a, b, store) else { continue };
                    let want = lb.starts_with(la);
                    pairs += 1;
                    related += usize::from(want);
                    disagreements += usize::from(got != want);
                }
            }
        }
    }
    outcome(
        mismatches == 0 && disagreements == 0 && related < pairs,
        format!(
            "certified prefix: {vote_sets} vote sequences, {mismatches} mismatches; prefix relation: {pairs} QC pairs from {runs} runs ({related} related), {disagreements} disagreements"
        ),
    )
}

fn crypto_fuzz() -> Outcome {
    const CASES: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut failures = BTreeMap::new();
    for scheme in [SchemeKind::Test, SchemeKind::Ed25519] {
        let rings: Vec<_> = [1usize, 2, 3].iter().map(|f| generate_keys(scheme, 3 * f + 1, 4, *f as u64)).collect();
        for _ in 0..CASES {
            let f = rng.random_range(1..=3);
            let (keys, ring) = &rings[f - 1];
            let n = 3 * f + 1;
            let size = rng.random_range(2 * f + 1..n);
            let mut signers: Vec<usize> = (0..n).collect();
            for i in 0..size {
                let j = rng.random_range(i..n);
                signers.swap(i, j);
            }
            let outsider = signers[size];
            signers.truncate(size);
            let hash = Digest(rng.random());
            let round = rng.random_range(1..1000);
            let prefixes: Vec<Prefix> = signers.iter().map(|_| rng.random_range(0..=4)).collect();
            let messages: Vec<Vec<u8>> = prefixes.iter().map(|p| signing::qc_vote(&hash, round, *p)).collect();
            let partials: Vec<_> = signers
                .iter()
                .zip(&prefixes)
                .zip(&messages)
                .map(|((s, p), m)| keys[*s].psign(*p, m).unwrap())
                .collect();
            let agg = combine(&partials).unwrap();
            let claims: Vec<Claim<'_>> = signers
                .iter()
                .zip(&prefixes)
                .zip(&messages)
                .map(|((s, p), m)| Claim { public: ring.share(ReplicaId(*s as u32), *p).unwrap(), tag: *p, message: m })
                .collect();
            if !verify_agg(&claims, &agg) {
                *failures.entry(format!("{scheme:?} roundtrip")).or_insert(0) += 1;
            }

            let victim = rng.random_range(0..size);
            let p = prefixes[victim];

            let mut forged = claims.clone();
            forged[victim].public = ring.share(ReplicaId(outsider as u32), p).unwrap();
            if verify_agg(&forged, &agg) {
                *failures.entry(format!("{scheme:?} signer")).or_insert(0) += 1;
            }

            let other = (p + rng.random_range(1..=4)) % 5;
            let moved = signing::qc_vote(&hash, round, other);
            let mut forged = claims.clone();
            forged[victim] = Claim {
                public: ring.share(ReplicaId(signers[victim] as u32), other).unwrap(),
                tag: other,
                message: &moved,
            };
            if verify_agg(&forged, &agg) {
                *failures.entry(format!("{scheme:?} prefix")).or_insert(0) += 1;
            }

            let mut altered = messages[victim].clone();
            let at = rng.random_range(0..altered.len());
            altered[at] ^= 1 << rng.random_range(0..8);
            let mut forged = claims.clone();
            forged[victim].message = &altered;
            if verify_agg(&forged, &agg) {
                *failures.entry(format!("{scheme:?} message")).or_insert(0) += 1;
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("{CASES} cases per scheme (test, ed25519), mutating signer, prefix and message; failures {failures:?}"),
    )
}

fn determinism() -> Outcome {
    let mut pass = true;
    let mut checked = 0;
    for (name, horizon) in [
        ("fault-free-n10", 60_000),
        ("full-glitch-n4", 60_000),
        ("equivocating-leader-n10", 60_000),
        ("pre-gst-n4", 80_000),
        ("crash-leader-n4", 60_000),
    ] {
        for seed in [3, 11] {
            let mut sc = scenario(name).with_seed(seed);
            sc.horizon.time = horizon;
            let (a, _) = harness::run(&sc, RunOptions::default()).unwrap();
            let (b, _) = harness::run(&sc, RunOptions::default()).unwrap();
            pass &=
                a.to_json().as_bytes() == b.to_json().as_bytes() && a.honest_log_digests() == b.honest_log_digests();
            checked += 1;
        }
    }
    let sc = scenario("stale-vote-replay-n4");
    let (one, _) = harness::campaign(&sc, 0..12, 1).unwrap();
    let (many, _) = harness::campaign(&sc, 0..12, 4).unwrap();
    let same_campaign = one.to_json() == many.to_json();
    outcome(
        pass && same_campaign,
        format!("{checked} scenario/seed pairs replayed twice; campaign summary independent of thread count: {same_campaign}"),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 9] = [
    (1, "safety campaign", safety_campaign),
    (2, "hop counts", hop_counts),
    (3, "block cadence", cadence),
    (4, "liveness bound", liveness_bound),
    (5, "robustness under drops", robustness),
    (6, "prefix decoupling", prefix_decoupling),
    (7, "oracle equivalence", oracle_equivalence),
    (8, "crypto mutation fuzz", crypto_fuzz),
    (9, "determinism", determinism),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let Outcome { pass, detail } = check();
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id} {name}: {verdict} ({:.1}s) {detail}", start.elapsed().as_secs_f64());
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
