//! Online invariant checking over everything honest replicas do.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rustc_hash::{FxHashMap as HashMap, FxHashSet as HashSet};
use serde::Serialize;

use crate::block::{is_prefix_of, Block, BlockStore};
use crate::cert::{EntryReason, QuorumCertificate};
use crate::codec::{chain_hash, encode, Digest};
use crate::effects::Observation;
use crate::message::Message;
use crate::replica::ReplicaSnapshot;
use crate::types::{Batch, BatchKey, Prefix, Rank, ReplicaId, Round, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    QcUniqueness,
    PrefixContainment,
    TotalOrder,
    Duplication,
    VoteDiscipline,
    Monotonicity,
    ModelSoundness,
    Totality,
    Validity,
    CommitDeadline,
}

impl ViolationKind {
    pub fn is_safety(self) -> bool {
        !matches!(self, ViolationKind::Totality | ViolationKind::Validity | ViolationKind::CommitDeadline)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub time: SimTime,
    pub replica: Option<ReplicaId>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[t={}] {:?}", self.time, self.kind)?;
        if let Some(r) = self.replica {
            write!(f, " at {r}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

#[derive(Default)]
struct VoteLog {
    /// Per round: QC-vote prefixes in order.
    qc: BTreeMap<Round, Vec<Prefix>>,
    cc: HashSet<Round>,
    tc: HashSet<Round>,
}

struct ReplicaView {
    snapshot: ReplicaSnapshot,
    votes: VoteLog,
    delivered: HashSet<BatchKey>,
    delivered_count: usize,
    log_digest: Digest,
    committed_at: HashMap<Digest, SimTime>,
}

/// Per-batch delivery bookkeeping for the eventual properties.
#[derive(Default, Clone, Copy)]
struct BatchFate {
    created_by_honest: Option<SimTime>,
    first_delivery: Option<SimTime>,
    deliveries: usize,
}

pub struct ObserverConfig {
    pub n: usize,
    pub delta: SimTime,
    pub honest: Vec<bool>,
    pub m: Prefix,
    pub gst: SimTime,
    /// Per-round commit deadline, if checked.
    pub commit_bound: Option<SimTime>,
    pub leader_of: fn(Round, usize) -> ReplicaId,
}

pub struct Observer {
    cfg: ObserverConfig,
    store: BlockStore,
    qc_by_round: HashMap<Round, Digest>,
    committed: BTreeMap<(Rank, Digest), Arc<QuorumCertificate>>,
    reference_log: Vec<(BatchKey, Digest)>,
    views: Vec<ReplicaView>,
    fates: HashMap<BatchKey, BatchFate>,
    first_entry: BTreeMap<Round, SimTime>,
    leader_block: HashMap<Round, Digest>,
    violations: Vec<Violation>,
    violation_count: usize,
    liveness_count: usize,
    first_safety: Option<Violation>,
}

const MAX_RECORDED: usize = 32;

impl Observer {
    pub fn new(cfg: ObserverConfig) -> Self {
        let views = (0..cfg.n)
            .map(|_| ReplicaView {
                snapshot: ReplicaSnapshot {
                    r_cur: 0,
                    r_timeout: 0,
                    qc_high: Rank::GENESIS,
                    qc_committed: Rank::GENESIS,
                    last_qc_vote: Rank::GENESIS,
                },
                votes: VoteLog::default(),
                delivered: HashSet::default(),
                delivered_count: 0,
                log_digest: Digest::ZERO,
                committed_at: HashMap::default(),
            })
            .collect();
        Observer {
            cfg,
            store: BlockStore::new(),
            qc_by_round: HashMap::default(),
            committed: BTreeMap::new(),
            reference_log: Vec::new(),
            views,
            fates: HashMap::default(),
            first_entry: BTreeMap::new(),
            leader_block: HashMap::default(),
            violations: Vec::new(),
            violation_count: 0,
            liveness_count: 0,
            first_safety: None,
        }
    }

    /// Every block any replica has sent.
    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn violation_count(&self) -> usize {
        self.violation_count
    }

    pub fn liveness_violation_count(&self) -> usize {
        self.liveness_count
    }

    pub fn first_safety_violation(&self) -> Option<&Violation> {
        self.first_safety.as_ref()
    }

    pub fn is_honest(&self, id: ReplicaId) -> bool {
        self.cfg.honest[id.index()]
    }

    pub fn log_digest(&self, id: ReplicaId) -> Digest {
        self.views[id.index()].log_digest
    }

    pub fn delivered_count(&self, id: ReplicaId) -> usize {
        self.views[id.index()].delivered_count
    }

    /// Time each block was first committed at `id`.
    pub fn commit_times(&self, id: ReplicaId) -> &HashMap<Digest, SimTime> {
        &self.views[id.index()].committed_at
    }

    /// Highest QC committed by any honest replica.
    pub fn highest_committed(&self) -> Option<&Arc<QuorumCertificate>> {
        self.committed.values().next_back()
    }

    fn report(&mut self, kind: ViolationKind, time: SimTime, replica: Option<ReplicaId>, detail: String) {
        let v = Violation { kind, time, replica, detail };
        if !kind.is_safety() {
            self.liveness_count += 1;
        } else if self.first_safety.is_none() {
            self.first_safety = Some(v.clone());
        }
        self.violation_count += 1;
        if self.violations.len() < MAX_RECORDED {
            self.violations.push(v);
        }
    }

    pub fn add_block(&mut self, block: Arc<Block>) {
        self.store.insert(block);
    }

    fn check_qc(&mut self, qc: &QuorumCertificate, now: SimTime, replica: Option<ReplicaId>) {
        if qc.is_genesis() {
            return;
        }
        match self.qc_by_round.get(&qc.round()) {
            Some(h) if *h != qc.hash() => {
                let detail = format!("round {} has QCs on {:?} and {:?}", qc.round(), h, qc.hash());
                self.report(ViolationKind::QcUniqueness, now, replica, detail);
            }
            Some(_) => {}
            None => {
                self.qc_by_round.insert(qc.round(), qc.hash());
            }
        }
    }

    fn check_reason(&mut self, reason: &EntryReason, now: SimTime, from: ReplicaId) {
        self.check_qc(reason.qc(), now, Some(from));
    }

    /// Records a message as it leaves `from`.
    pub fn on_send(&mut self, from: ReplicaId, msg: &Message, now: SimTime) {
        if let Message::Propose(b) = msg {
            self.store.insert(b.clone());
        }
        if !self.is_honest(from) {
            return;
        }
        match msg {
            Message::Propose(b) => self.check_reason(b.entry_reason(), now, from),
            Message::AdvanceRound(r) => self.check_reason(r, now, from),
            Message::CcVote { qc, .. } | Message::TcVote { qc, .. } => self.check_qc(qc, now, Some(from)),
            Message::FetchResponse { blocks, .. } => {
                for b in blocks {
                    self.store.insert(b.clone());
                }
            }
            _ => {}
        }
    }

    pub fn on_observation(&mut self, id: ReplicaId, obs: &Observation, snapshot: &ReplicaSnapshot, now: SimTime) {
        if !self.is_honest(id) {
            return;
        }
        match obs {
            Observation::EnteredRound { round, .. } => {
                self.first_entry.entry(*round).or_insert(now);
            }
            Observation::Proposed { block, .. } => {
                self.store.insert(block.clone());
                if (self.cfg.leader_of)(block.round(), self.cfg.n) == id {
                    self.leader_block.entry(block.round()).or_insert(block.digest());
                }
            }
            Observation::QcVoted { round, prefix, .. } => {
                let r_timeout = snapshot.r_timeout;
                let votes = self.views[id.index()].votes.qc.entry(*round).or_default();
                votes.push(*prefix);
                let problem = if votes.len() > 2 {
                    Some(format!("{} QC-votes in round {round}", votes.len()))
                } else if votes.len() == 2 && votes[1] <= votes[0] {
                    Some(format!("second QC-vote in round {round} does not raise the prefix ({:?})", votes))
                } else if *round <= r_timeout {
                    Some(format!("QC-vote in round {round} after timing out round {r_timeout}"))
                } else {
                    None
                };
                if let Some(d) = problem {
                    self.report(ViolationKind::VoteDiscipline, now, Some(id), d);
                }
            }
            Observation::CcVoted { round, .. } => {
                let fresh = self.views[id.index()].votes.cc.insert(*round);
                if !fresh {
                    self.report(ViolationKind::VoteDiscipline, now, Some(id), format!("two CC-votes in round {round}"));
                } else if *round <= snapshot.r_timeout {
                    let d = format!("CC-vote in round {round} after timing out round {}", snapshot.r_timeout);
                    self.report(ViolationKind::VoteDiscipline, now, Some(id), d);
                }
            }
            Observation::TcVoted { round, retransmit } => {
                if !retransmit && !self.views[id.index()].votes.tc.insert(*round) {
                    self.report(ViolationKind::VoteDiscipline, now, Some(id), format!("two TC-votes in round {round}"));
                }
            }
            Observation::QcFormed(qc) => self.check_qc(qc, now, Some(id)),
            Observation::Committed(qc) => self.on_commit(id, qc.clone(), now),
            Observation::BatchCreated(batch) => {
                self.fates.entry(batch.key()).or_default().created_by_honest = Some(batch.created_at);
            }
            _ => {}
        }
    }

    fn on_commit(&mut self, id: ReplicaId, qc: Arc<QuorumCertificate>, now: SimTime) {
        self.check_qc(&qc, now, Some(id));
        // Mark newly committed blocks, walking back to the first known one.
        let view = &mut self.views[id.index()];
        let mut cur = qc.hash();
        while !view.committed_at.contains_key(&cur) {
            let Some(block) = self.store.get(&cur) else { break };
            view.committed_at.insert(cur, now);
            let parent = block.qc_parent();
            if parent.is_genesis() {
                break;
            }
            cur = parent.hash();
        }

        let key = (qc.rank(), qc.hash());
        if self.committed.contains_key(&key) {
            return;
        }
        let below = self.committed.range(..key).next_back().map(|(_, q)| q.clone());
        let above = self.committed.range(key..).next().map(|(_, q)| q.clone());
        for (lo, hi) in [(below, Some(qc.clone())), (Some(qc.clone()), above)] {
            let (Some(lo), Some(hi)) = (lo, hi) else { continue };
            match is_prefix_of(&lo, &hi, &self.store) {
                Ok(true) => {}
                Ok(false) => {
                    let d = format!("committed QCs {lo:?} and {hi:?} are not prefix-related");
                    self.report(ViolationKind::PrefixContainment, now, Some(id), d);
                }
                Err(e) => {
                    let d = format!("cannot relate committed QCs {lo:?} and {hi:?}: {e:?}");
                    self.report(ViolationKind::PrefixContainment, now, Some(id), d);
                }
            }
        }
        self.committed.insert(key, qc);
    }

    pub fn on_deliver(&mut self, id: ReplicaId, batch: &Batch, now: SimTime) {
        if !self.is_honest(id) {
            return;
        }
        let key = batch.key();
        let digest = batch.digest();
        let view = &mut self.views[id.index()];
        if !view.delivered.insert(key) {
            self.report(ViolationKind::Duplication, now, Some(id), format!("{key:?} delivered twice"));
            return;
        }
        let pos = view.delivered_count;
        view.delivered_count += 1;
        view.log_digest = chain_hash(&view.log_digest, &encode(&(key, digest)));
        if pos < self.reference_log.len() {
            if self.reference_log[pos] != (key, digest) {
                let d = format!(
                    "position {pos}: delivered {key:?}, another replica delivered {:?}",
                    self.reference_log[pos].0
                );
                self.report(ViolationKind::TotalOrder, now, Some(id), d);
            }
        } else {
            self.reference_log.push((key, digest));
        }
        let fate = self.fates.entry(key).or_default();
        fate.deliveries += 1;
        fate.first_delivery.get_or_insert(now);
    }

    /// Checks that replica state only moves forward.
    pub fn after_step(&mut self, id: ReplicaId, snap: ReplicaSnapshot, now: SimTime) {
        if !self.is_honest(id) {
            return;
        }
        let prev = self.views[id.index()].snapshot;
        let fields = [
            ("r_cur", Rank::new(prev.r_cur, 0), Rank::new(snap.r_cur, 0)),
            ("r_timeout", Rank::new(prev.r_timeout, 0), Rank::new(snap.r_timeout, 0)),
            ("qc_high", prev.qc_high, snap.qc_high),
            ("qc_committed", prev.qc_committed, snap.qc_committed),
            ("last_qc_vote", prev.last_qc_vote, snap.last_qc_vote),
        ];
        for (name, before, after) in fields {
            if after < before {
                let d = format!("{name} went from {before:?} to {after:?}");
                self.report(ViolationKind::Monotonicity, now, Some(id), d);
            }
        }
        self.views[id.index()].snapshot = snap;
    }

    /// A post-GST message between honest replicas took longer than Δ.
    pub fn on_late_message(&mut self, from: ReplicaId, to: ReplicaId, sent: SimTime, at: SimTime) {
        let d = format!("message {from} -> {to} sent at {sent} arrives at {at}");
        self.report(ViolationKind::ModelSoundness, sent, Some(from), d);
    }

    /// Eventual properties, evaluated once the run is over. Batches first
    /// delivered or created after `deadline` are exempt.
    pub fn finish(
        &mut self,
        end: SimTime,
        slack: SimTime,
        check_liveness: bool,
        glitch: &dyn Fn(SimTime, SimTime) -> bool,
    ) {
        let honest = self.cfg.honest.iter().filter(|h| **h).count();
        let deadline = end.saturating_sub(slack);
        if check_liveness {
            let mut fates: Vec<(BatchKey, BatchFate)> = self.fates.iter().map(|(k, f)| (*k, *f)).collect();
            fates.sort_by_key(|(k, _)| *k);
            for (key, fate) in fates {
                if fate.deliveries >= honest {
                    continue;
                }
                if let Some(t) = fate.first_delivery {
                    if t <= deadline && end > slack {
                        let d = format!("{key:?} delivered at {t} by {} of {honest} honest replicas", fate.deliveries);
                        self.report(ViolationKind::Totality, end, None, d);
                        continue;
                    }
                }
                if let Some(t) = fate.created_by_honest {
                    if t >= self.cfg.gst && t <= deadline && end > slack {
                        let d = format!(
                            "{key:?} broadcast at {t} delivered by {} of {honest} honest replicas",
                            fate.deliveries
                        );
                        self.report(ViolationKind::Validity, end, None, d);
                    }
                }
            }
        }
        if let Some(bound) = self.cfg.commit_bound {
            let rounds: Vec<(Round, SimTime)> = self.first_entry.iter().map(|(r, t)| (*r, *t)).collect();
            for (round, entered) in rounds {
                let leader = (self.cfg.leader_of)(round, self.cfg.n);
                if !self.is_honest(leader) || entered < self.cfg.gst || entered + bound > end {
                    continue;
                }
                if glitch(entered, entered + bound) {
                    continue;
                }
                let Some(block) = self.leader_block.get(&round).copied() else {
                    let d = format!("round {round} entered at {entered} but its honest leader {leader} never proposed");
                    self.report(ViolationKind::CommitDeadline, end, Some(leader), d);
                    continue;
                };
                for i in 0..self.cfg.n {
                    if !self.cfg.honest[i] {
                        continue;
                    }
                    let at = self.views[i].committed_at.get(&block).copied();
                    if at.map_or(true, |t| t > entered + bound) {
                        let d = format!(
                            "round {round} block entered at {entered} committed at {at:?}, deadline {}",
                            entered + bound
                        );
                        self.report(ViolationKind::CommitDeadline, end, Some(ReplicaId(i as u32)), d);
                    }
                }
            }
        }
    }
}
