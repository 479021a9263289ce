//! Per-transaction latency tracking and run-level aggregates.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rustc_hash::FxHashMap as HashMap;
use serde::Serialize;

use crate::block::{chain_of, BlockStore};
use crate::codec::Digest;
use crate::effects::Observation;
use crate::types::{Batch, BatchKey, Prefix, ReplicaId, Round, SimTime};

/// Lifecycle of one client transaction. Times are absolute ticks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TxRecord {
    pub id: u64,
    pub submitter: ReplicaId,
    pub submitted_at: SimTime,
    pub batched_at: Option<SimTime>,
    /// Batches are multicast when created.
    pub batch_broadcast_at: Option<SimTime>,
    /// When the proposing leader could first include the batch.
    pub ready_at: Option<SimTime>,
    pub first_proposed_at: Option<SimTime>,
    /// Delivery time at each replica; `None` for undelivered or faulty ones.
    pub delivered_at: Vec<Option<SimTime>>,
    pub committing_round: Option<Round>,
}

impl TxRecord {
    /// Last delivery among `honest`, if all of them delivered.
    pub fn completed_at(&self, honest: &[bool]) -> Option<SimTime> {
        let mut last = 0;
        for (i, h) in honest.iter().enumerate() {
            if *h {
                last = last.max(self.delivered_at[i]?);
            }
        }
        Some(last)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub max: f64,
}

impl Summary {
    /// Nearest-rank percentiles.
    pub fn of(values: &mut [f64]) -> Self {
        if values.is_empty() {
            return Summary::default();
        }
        values.sort_by(|a, b| a.total_cmp(b));
        let n = values.len();
        let pct = |p: f64| values[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        Summary {
            count: n,
            mean: values.iter().sum::<f64>() / n as f64,
            p25: pct(0.25),
            p50: pct(0.50),
            p75: pct(0.75),
            max: values[n - 1],
        }
    }

    fn scaled(self, by: f64) -> Self {
        Summary {
            count: self.count,
            mean: self.mean / by,
            p25: self.p25 / by,
            p50: self.p50 / by,
            p75: self.p75 / by,
            max: self.max / by,
        }
    }
}

/// Latency components in units of the fixed one-hop delay.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct HopCounts {
    pub hop: SimTime,
    pub dissemination: Summary,
    pub inclusion: Summary,
    pub consensus: Summary,
    pub ordering: Summary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub tx_submitted: usize,
    pub tx_complete: usize,
    /// Honest-submitted transactions not delivered everywhere by the end.
    pub tx_pending: usize,
    pub oldest_pending_age: SimTime,
    pub window: (SimTime, SimTime),
    /// Submission to batch creation.
    pub batching: Summary,
    /// Batch broadcast to availability at the proposing leader.
    pub dissemination: Summary,
    /// Availability at the leader to the first proposal containing the batch.
    pub inclusion: Summary,
    /// First proposal to the last honest delivery.
    pub consensus: Summary,
    /// Batch broadcast to the last honest delivery.
    pub ordering: Summary,
    /// Submission to the last honest delivery.
    pub end_to_end: Summary,
    /// Completed transactions per 1000 ticks.
    pub throughput: f64,
    /// Blocks committed at the reference replica per 1000 ticks.
    pub block_rate: f64,
    pub max_round: Round,
    pub tc_rounds: usize,
    pub tc_rate: f64,
    pub committed_blocks: usize,
    /// Committed prefix of non-empty committed blocks at the reference replica.
    pub prefix_histogram: BTreeMap<Prefix, usize>,
    /// QCs formed on blocks with optimistic payload, by certified prefix.
    pub qc_prefix_histogram: BTreeMap<Prefix, usize>,
    pub fetch_requests: u64,
    pub messages: [u64; 3],
    pub messages_dropped: u64,
    pub equivocations: u64,
    pub rejected: u64,
    pub hop_counts: Option<HopCounts>,
}

struct BatchRecord {
    created_at: SimTime,
    ready_at: Option<SimTime>,
    first_proposed_at: Option<SimTime>,
    delivered_at: Vec<Option<SimTime>>,
    committing_round: Option<Round>,
}

struct TxRaw {
    submitter: ReplicaId,
    submitted_at: SimTime,
    batch: Option<usize>,
}

pub struct MetricsCollector {
    n: usize,
    honest: Vec<bool>,
    txs: Vec<TxRaw>,
    batches: Vec<BatchRecord>,
    batch_index: HashMap<BatchKey, usize>,
    max_round: Round,
    tc_rounds: BTreeSet<Round>,
    qc_seen: BTreeSet<(Round, Prefix, Digest)>,
    qc_prefix_histogram: BTreeMap<Prefix, usize>,
    fetch_requests: u64,
    equivocations: u64,
    rejected: u64,
}

impl MetricsCollector {
    pub fn new(n: usize, honest: Vec<bool>) -> Self {
        MetricsCollector {
            n,
            honest,
            txs: Vec::new(),
            batches: Vec::new(),
            batch_index: HashMap::default(),
            max_round: 0,
            tc_rounds: BTreeSet::new(),
            qc_seen: BTreeSet::new(),
            qc_prefix_histogram: BTreeMap::new(),
            fetch_requests: 0,
            equivocations: 0,
            rejected: 0,
        }
    }

    /// Transaction ids must be allocated densely from 0.
    pub fn on_submit(&mut self, id: u64, submitter: ReplicaId, now: SimTime) {
        debug_assert_eq!(id as usize, self.txs.len());
        self.txs.push(TxRaw { submitter, submitted_at: now, batch: None });
    }

    pub fn on_observation(&mut self, id: ReplicaId, obs: &Observation, store: &BlockStore, now: SimTime) {
        if !self.honest[id.index()] {
            return;
        }
        match obs {
            Observation::EnteredRound { round, .. } => self.max_round = self.max_round.max(*round),
            Observation::TcFormed { round } => {
                self.tc_rounds.insert(*round);
            }
            Observation::BatchCreated(batch) => {
                let idx = self.batches.len();
                self.batches.push(BatchRecord {
                    created_at: batch.created_at,
                    ready_at: None,
                    first_proposed_at: None,
                    delivered_at: vec![None; self.n],
                    committing_round: None,
                });
                self.batch_index.insert(batch.key(), idx);
                for tx in &batch.txs {
                    if let Some(raw) = self.txs.get_mut(tx.id as usize) {
                        raw.batch = Some(idx);
                    }
                }
            }
            Observation::Proposed { ready, .. } => {
                for (key, ready_at) in ready {
                    if let Some(&idx) = self.batch_index.get(key) {
                        let rec = &mut self.batches[idx];
                        if rec.first_proposed_at.is_none() {
                            rec.first_proposed_at = Some(now);
                            rec.ready_at = Some(*ready_at);
                        }
                    }
                }
            }
            Observation::QcFormed(qc) => {
                if self.qc_seen.insert((qc.round(), qc.prefix(), qc.hash())) {
                    if let Some(b) = store.get(&qc.hash()) {
                        if b.payload().optimistic().next().is_some() {
                            *self.qc_prefix_histogram.entry(qc.prefix()).or_default() += 1;
                        }
                    }
                }
            }
            Observation::FetchRequested { .. } => self.fetch_requests += 1,
            Observation::Equivocation { .. } => self.equivocations += 1,
            Observation::Rejected { .. } => self.rejected += 1,
            _ => {}
        }
    }

    pub fn on_deliver(&mut self, id: ReplicaId, batch: &Batch, round: Round, now: SimTime) {
        if !self.honest[id.index()] {
            return;
        }
        if let Some(&idx) = self.batch_index.get(&batch.key()) {
            let rec = &mut self.batches[idx];
            if rec.delivered_at[id.index()].is_none() {
                rec.delivered_at[id.index()] = Some(now);
            }
            rec.committing_round.get_or_insert(round);
        }
    }

    pub fn tx_records(&self) -> Vec<TxRecord> {
        self.txs
            .iter()
            .enumerate()
            .map(|(id, raw)| {
                let rec = raw.batch.map(|i| &self.batches[i]);
                TxRecord {
                    id: id as u64,
                    submitter: raw.submitter,
                    submitted_at: raw.submitted_at,
                    batched_at: rec.map(|r| r.created_at),
                    batch_broadcast_at: rec.map(|r| r.created_at),
                    ready_at: rec.and_then(|r| r.ready_at),
                    first_proposed_at: rec.and_then(|r| r.first_proposed_at),
                    delivered_at: rec.map(|r| r.delivered_at.clone()).unwrap_or_else(|| vec![None; self.n]),
                    committing_round: rec.and_then(|r| r.committing_round),
                }
            })
            .collect()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "id",
            "submitter",
            "submitted_at",
            "batched_at",
            "batch_broadcast_at",
            "ready_at",
            "first_proposed_at",
            "last_delivered_at",
            "committing_round",
        ])?;
        let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        for rec in self.tx_records() {
            w.write_record([
                rec.id.to_string(),
                rec.submitter.0.to_string(),
                rec.submitted_at.to_string(),
                opt(rec.batched_at),
                opt(rec.batch_broadcast_at),
                opt(rec.ready_at),
                opt(rec.first_proposed_at),
                opt(rec.completed_at(&self.honest)),
                opt(rec.committing_round),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aggregates over batches broadcast inside the steady-state window
    /// `[end/10, end - end/10]`.
    pub fn finish(&self, ctx: FinishContext<'_>) -> RunMetrics {
        let end = ctx.end;
        let window = (end / 10, end - end / 10);
        let in_window = |t: SimTime| t >= window.0 && t <= window.1;
        let span = (window.1 - window.0).max(1) as f64;

        let mut batching = Vec::new();
        let mut dissemination = Vec::new();
        let mut inclusion = Vec::new();
        let mut consensus = Vec::new();
        let mut ordering = Vec::new();
        let mut end_to_end = Vec::new();
        let mut completed_in_window = 0usize;
        let mut tx_submitted = 0;
        let mut tx_complete = 0;
        let mut tx_pending = 0;
        let mut oldest_pending: SimTime = 0;

        for raw in &self.txs {
            if !self.honest[raw.submitter.index()] {
                continue;
            }
            tx_submitted += 1;
            let rec = raw.batch.map(|i| &self.batches[i]);
            let done = rec.and_then(|r| {
                let mut last = 0;
                for (i, h) in self.honest.iter().enumerate() {
                    if *h {
                        last = last.max(r.delivered_at[i]?);
                    }
                }
                Some(last)
            });
            let Some(done) = done else {
                tx_pending += 1;
                oldest_pending = oldest_pending.max(end.saturating_sub(raw.submitted_at));
                continue;
            };
            tx_complete += 1;
            if in_window(done) {
                completed_in_window += 1;
            }
            let rec = rec.expect("completed transactions have a batch");
            if !in_window(rec.created_at) {
                continue;
            }
            batching.push((rec.created_at - raw.submitted_at) as f64);
            ordering.push((done - rec.created_at) as f64);
            end_to_end.push((done - raw.submitted_at) as f64);
            if let (Some(ready), Some(proposed)) = (rec.ready_at, rec.first_proposed_at) {
                dissemination.push(ready.saturating_sub(rec.created_at) as f64);
                inclusion.push(proposed.saturating_sub(ready) as f64);
                consensus.push(done.saturating_sub(proposed) as f64);
            }
        }

        // Committed chain at the reference replica.
        let mut prefix_histogram = BTreeMap::new();
        let mut committed_blocks = 0;
        let mut blocks_in_window = 0;
        if let (Some(qc), Some(times)) = (ctx.reference_committed, ctx.reference_commit_times) {
            if let Ok(chain) = chain_of(qc, ctx.store) {
                for el in chain.iter().filter(|e| !e.is_genesis()) {
                    committed_blocks += 1;
                    if times.get(&el.block).is_some_and(|t| in_window(*t)) {
                        blocks_in_window += 1;
                    }
                    if let Some(b) = ctx.store.get(&el.block) {
                        if b.payload().optimistic().next().is_some() {
                            *prefix_histogram.entry(el.prefix).or_default() += 1;
                        }
                    }
                }
            }
        }

        let hop_counts = ctx.hop.map(|hop| {
            let h = hop as f64;
            HopCounts {
                hop,
                dissemination: Summary::of(&mut dissemination.clone()).scaled(h),
                inclusion: Summary::of(&mut inclusion.clone()).scaled(h),
                consensus: Summary::of(&mut consensus.clone()).scaled(h),
                ordering: Summary::of(&mut ordering.clone()).scaled(h),
            }
        });

        RunMetrics {
            tx_submitted,
            tx_complete,
            tx_pending,
            oldest_pending_age: oldest_pending,
            window,
            batching: Summary::of(&mut batching),
            dissemination: Summary::of(&mut dissemination),
            inclusion: Summary::of(&mut inclusion),
            consensus: Summary::of(&mut consensus),
            ordering: Summary::of(&mut ordering),
            end_to_end: Summary::of(&mut end_to_end),
            throughput: completed_in_window as f64 * 1000.0 / span,
            block_rate: blocks_in_window as f64 * 1000.0 / span,
            max_round: self.max_round,
            tc_rounds: self.tc_rounds.len(),
            tc_rate: if self.max_round == 0 { 0.0 } else { self.tc_rounds.len() as f64 / self.max_round as f64 },
            committed_blocks,
            prefix_histogram,
            qc_prefix_histogram: self.qc_prefix_histogram.clone(),
            fetch_requests: self.fetch_requests,
            messages: ctx.messages,
            messages_dropped: ctx.dropped,
            equivocations: self.equivocations,
            rejected: self.rejected,
            hop_counts,
        }
    }
}

/// Simulator state needed to finalize metrics.
pub struct FinishContext<'a> {
    pub end: SimTime,
    pub store: &'a BlockStore,
    pub reference_committed: Option<&'a crate::cert::QuorumCertificate>,
    pub reference_commit_times: Option<&'a HashMap<Digest, SimTime>>,
    pub messages: [u64; 3],
    pub dropped: u64,
    /// Fixed one-hop delay, when hop counts are requested.
    pub hop: Option<SimTime>,
}
