//! Running scenarios: single runs, seed campaigns and variant comparisons.

use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::codec::{hash_bytes, Domain};
use crate::metrics::{RunMetrics, Summary};
use crate::scenario::{Fault, ScenarioConfig, ScenarioError};
use crate::sim::observer::{Violation, ViolationKind};
use crate::sim::{ReplicaReport, SimOptions, SimOutput, Simulation};
use crate::types::{Round, SimTime, Variant};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("hop counts need fixed, uniform delays: {0}")]
    HopCount(String),
    #[error("cannot build thread pool: {0}")]
    Threads(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub hop_count_mode: bool,
    pub trace: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub scenario: String,
    pub variant: Variant,
    pub seed: u64,
    pub n: usize,
    pub f: usize,
    pub end_time: SimTime,
    pub events: u64,
    pub safety_ok: bool,
    pub liveness_ok: bool,
    pub violation_count: usize,
    pub violations: Vec<Violation>,
    pub metrics: RunMetrics,
    pub replicas: Vec<ReplicaReport>,
}

impl SimReport {
    pub fn passed(&self) -> bool {
        self.safety_ok && self.liveness_ok
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Hex digest of the JSON report.
    pub fn digest(&self) -> String {
        hash_bytes(Domain::Report, self.to_json().as_bytes()).to_hex()
    }

    /// Delivered-log digests of the honest replicas.
    pub fn honest_log_digests(&self) -> Vec<&str> {
        self.replicas
            .iter()
            .filter(|r| r.status == crate::sim::NodeStatus::Honest)
            .map(|r| r.log_digest.as_str())
            .collect()
    }
}

/// A failing run with the events leading up to the first violation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Counterexample {
    pub scenario: String,
    pub variant: Variant,
    pub seed: u64,
    pub violation: Violation,
    pub trace: Vec<String>,
}

/// The fixed one-hop delay if the scenario admits exact hop counts.
pub fn hop_delay(sc: &ScenarioConfig) -> Result<SimTime, HarnessError> {
    let net = &sc.network;
    let delay = net
        .uniform_fixed_delay()
        .ok_or_else(|| HarnessError::HopCount("delay models are not all fixed and equal".into()))?;
    if net.processing_cost != 0 {
        return Err(HarnessError::HopCount("processing cost is not zero".into()));
    }
    if net.bandwidth.consensus.is_some() || net.bandwidth.qs_control.is_some() || net.bandwidth.data.is_some() {
        return Err(HarnessError::HopCount("links have bandwidth limits".into()));
    }
    if net.gst > 0 && net.pre_gst.is_some() {
        return Err(HarnessError::HopCount("delays before GST are adversarial".into()));
    }
    if sc.faults.iter().any(|f| matches!(f, Fault::ClockSkew { .. })) {
        return Err(HarnessError::HopCount("clocks are skewed".into()));
    }
    Ok(delay)
}

fn report_of(sc: &ScenarioConfig, out: &SimOutput) -> SimReport {
    let safety_ok = out.first_safety_violation.is_none();
    let liveness_ok = out.liveness_violations == 0;
    SimReport {
        scenario: sc.name.clone(),
        variant: sc.protocol.variant,
        seed: sc.seed,
        n: sc.protocol.n,
        f: sc.protocol.f,
        end_time: out.end_time,
        events: out.events,
        safety_ok,
        liveness_ok,
        violation_count: out.violation_count,
        violations: out.violations.clone(),
        metrics: out.metrics.clone(),
        replicas: out.replicas.clone(),
    }
}

/// Runs one scenario. The returned output keeps the per-transaction table.
pub fn run(sc: &ScenarioConfig, opts: RunOptions) -> Result<(SimReport, SimOutput), HarnessError> {
    sc.validate()?;
    let hop = if opts.hop_count_mode { Some(hop_delay(sc)?) } else { None };
    let mut sim = Simulation::new(sc.clone(), SimOptions { trace: opts.trace, hop });
    sim.run();
    let out = sim.finish();
    Ok((report_of(sc, &out), out))
}

/// Re-runs a failing scenario with tracing to capture the events before the
/// first violation.
pub fn counterexample(sc: &ScenarioConfig) -> Result<Option<Counterexample>, HarnessError> {
    let (report, out) = run(sc, RunOptions { trace: true, hop_count_mode: false })?;
    let violation = out.first_safety_violation.clone().or_else(|| report.violations.first().cloned());
    Ok(violation.map(|violation| Counterexample {
        scenario: sc.name.clone(),
        variant: sc.protocol.variant,
        seed: sc.seed,
        violation,
        trace: out.trace.unwrap_or_default(),
    }))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CampaignSummary {
    pub scenario: String,
    pub variant: Variant,
    pub seeds: Range<u64>,
    pub runs: usize,
    pub passed: usize,
    pub failed: usize,
    pub failing_seeds: Vec<u64>,
    pub minimal_failing_seed: Option<u64>,
    pub violations_by_kind: BTreeMap<ViolationKind, usize>,
    pub min_rounds: Round,
    pub mean_rounds: f64,
    pub mean_ordering_p50: f64,
    pub mean_tc_rate: f64,
}

impl CampaignSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summaries serialize")
    }
}

struct SeedResult {
    seed: u64,
    passed: bool,
    kinds: Vec<ViolationKind>,
    rounds: Round,
    ordering_p50: f64,
    tc_rate: f64,
}

const MAX_LISTED_FAILURES: usize = 100;

/// Runs `seeds` in parallel. Results do not depend on the thread count.
pub fn campaign(
    sc: &ScenarioConfig,
    seeds: Range<u64>,
    parallelism: usize,
) -> Result<(CampaignSummary, Option<Counterexample>), HarnessError> {
    sc.validate()?;
    if let Some(last) = seeds.clone().last() {
        sc.clone().with_seed(last).validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(parallelism.max(1)).build()?;
    let results: Vec<SeedResult> = pool.install(|| {
        seeds
            .clone()
            .into_par_iter()
            .map(|seed| {
                let sc = sc.clone().with_seed(seed);
                let (report, _) = run(&sc, RunOptions::default()).expect("validated scenario");
                SeedResult {
                    seed,
                    passed: report.passed(),
                    kinds: report.violations.iter().map(|v| v.kind).collect(),
                    rounds: report
                        .replicas
                        .iter()
                        .filter(|r| r.status == crate::sim::NodeStatus::Honest)
                        .map(|r| r.r_cur)
                        .min()
                        .unwrap_or(0),
                    ordering_p50: report.metrics.ordering.p50,
                    tc_rate: report.metrics.tc_rate,
                }
            })
            .collect()
    });

    let runs = results.len();
    let mut summary = CampaignSummary {
        scenario: sc.name.clone(),
        variant: sc.protocol.variant,
        seeds: seeds.clone(),
        runs,
        min_rounds: results.iter().map(|r| r.rounds).min().unwrap_or(0),
        ..Default::default()
    };
    for r in &results {
        if r.passed {
            summary.passed += 1;
        } else {
            summary.failed += 1;
            if summary.failing_seeds.len() < MAX_LISTED_FAILURES {
                summary.failing_seeds.push(r.seed);
            }
            summary.minimal_failing_seed.get_or_insert(r.seed);
        }
        for k in &r.kinds {
            *summary.violations_by_kind.entry(*k).or_default() += 1;
        }
    }
    if runs > 0 {
        summary.mean_rounds = results.iter().map(|r| r.rounds as f64).sum::<f64>() / runs as f64;
        summary.mean_ordering_p50 = results.iter().map(|r| r.ordering_p50).sum::<f64>() / runs as f64;
        summary.mean_tc_rate = results.iter().map(|r| r.tc_rate).sum::<f64>() / runs as f64;
    }
    let cex = match summary.minimal_failing_seed {
        Some(seed) => counterexample(&sc.clone().with_seed(seed))?,
        None => None,
    };
    Ok((summary, cex))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub passed: bool,
    pub ordering: Summary,
    pub end_to_end: Summary,
    pub consensus: Summary,
    pub throughput: f64,
    pub block_rate: f64,
    pub tc_rate: f64,
    pub max_round: Round,
    pub prefix_histogram: BTreeMap<u32, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub scenario: String,
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparisons serialize")
    }
}

/// Runs the same scenario and seed under each variant.
pub fn compare(sc: &ScenarioConfig, variants: &[Variant], opts: RunOptions) -> Result<Comparison, HarnessError> {
    let mut rows = Vec::new();
    for v in variants {
        let (report, _) = run(&sc.clone().with_variant(*v), opts)?;
        let m = report.metrics.clone();
        rows.push(ComparisonRow {
            variant: *v,
            passed: report.passed(),
            ordering: m.ordering,
            end_to_end: m.end_to_end,
            consensus: m.consensus,
            throughput: m.throughput,
            block_rate: m.block_rate,
            tc_rate: m.tc_rate,
            max_round: m.max_round,
            prefix_histogram: m.prefix_histogram,
        });
    }
    Ok(Comparison { scenario: sc.name.clone(), seed: sc.seed, rows })
}
