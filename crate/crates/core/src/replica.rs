//! The per-replica consensus state machine.
//!
//! A [`Replica`] consumes one input at a time (message, timer, client
//! transaction) and appends its outputs to an [`Effects`] buffer. It performs
//! no I/O and reads no clock other than the `now` it is handed, which keeps
//! runs reproducible.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::{FxHashMap as HashMap, FxHashSet as HashSet};

use crate::block::{element_batches, Block, BlockPrefix, BlockStore};
use crate::cert::{
    certified_prefix, genesis_digest, signing, CommitCertificate, EntryReason, ProofOfAvailability, QuorumCertificate,
    TimeoutCertificate, UNTAGGED,
};
use crate::codec::Digest;
use crate::crypto::{combine, pver, KeyShareSet, PartialSignature, PublicKeyRing};
use crate::effects::{Effects, Observation, ReasonKind, Timer};
use crate::message::{FetchItem, Message};
use crate::quorum_store::{BatchOutcome, BatchStore, Fetcher};
use crate::types::{Batch, BatchKey, Prefix, ProtocolConfig, Rank, ReplicaId, Round, SimTime, Transaction};
use crate::variants::VariantPolicy;

type Qc = Arc<QuorumCertificate>;

/// Read-only view of the protocol variables the observer tracks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ReplicaSnapshot {
    pub r_cur: Round,
    pub r_timeout: Round,
    pub qc_high: Rank,
    pub qc_committed: Rank,
    pub last_qc_vote: Rank,
}

/// Remembers certificates that already passed verification. Entries are
/// keyed by allocation and keep the allocation alive, so a key can never
/// refer to different contents.
#[derive(Default)]
struct VerifyCache {
    seen: HashSet<usize>,
    keep: Vec<Keep>,
}

enum Keep {
    Qc(#[allow(dead_code)] Qc),
    Cc(#[allow(dead_code)] Arc<CommitCertificate>),
    Tc(#[allow(dead_code)] Arc<TimeoutCertificate>),
    Poa(#[allow(dead_code)] Arc<ProofOfAvailability>),
}

impl VerifyCache {
    const LIMIT: usize = 16384;

    fn check<T>(&mut self, arc: &Arc<T>, wrap: impl FnOnce(Arc<T>) -> Keep, verify: impl FnOnce(&T) -> bool) -> bool {
        let key = Arc::as_ptr(arc) as *const u8 as usize;
        if self.seen.contains(&key) {
            return true;
        }
        if !verify(arc) {
            return false;
        }
        if self.keep.len() >= Self::LIMIT {
            self.seen.clear();
            self.keep.clear();
        }
        self.seen.insert(key);
        self.keep.push(wrap(arc.clone()));
        true
    }
}

pub struct Replica {
    id: ReplicaId,
    cfg: Arc<ProtocolConfig>,
    keys: KeyShareSet,
    ring: Arc<PublicKeyRing>,
    policy: VariantPolicy,
    rng: ChaCha8Rng,
    timer_scale: f64,
    now: SimTime,

    r_cur: Round,
    r_timeout: Round,
    entry_reason: EntryReason,
    last_qc_vote: Rank,
    cc_voted: BTreeSet<Round>,
    cc_voted_floor: Round,
    qc_high: Qc,
    qc_committed: Qc,
    proposals: BTreeMap<Round, Arc<Block>>,
    qc_votes: BTreeMap<Round, HashMap<Digest, BTreeMap<ReplicaId, (Prefix, PartialSignature)>>>,
    qcs_formed: BTreeMap<Round, Rank>,
    cc_votes: BTreeMap<Round, BTreeMap<ReplicaId, (Qc, PartialSignature)>>,
    tc_votes: BTreeMap<Round, BTreeMap<ReplicaId, (Qc, PartialSignature)>>,
    my_tc_vote: Option<(Round, Arc<Message>)>,
    qc_vote_gen: u64,
    timeout_gen: u64,

    blocks: BlockStore,
    linked: HashSet<Digest>,
    orphans: HashMap<Digest, Vec<Digest>>,
    store: BatchStore,
    fetcher: Fetcher,
    pending_two_chain: Vec<Qc>,
    pending_commits: VecDeque<Qc>,
    delivered_tip: BlockPrefix,
    verified: VerifyCache,
}

impl Replica {
    pub fn new(
        id: ReplicaId,
        cfg: Arc<ProtocolConfig>,
        keys: KeyShareSet,
        ring: Arc<PublicKeyRing>,
        seed: u64,
    ) -> Self {
        let genesis = Arc::new(QuorumCertificate::genesis());
        Replica {
            id,
            policy: VariantPolicy::for_config(&cfg),
            rng: ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(id.0 as u64 + 1))),
            timer_scale: 1.0,
            now: 0,
            r_cur: 0,
            r_timeout: 0,
            entry_reason: EntryReason::FullQc(genesis.clone()),
            last_qc_vote: Rank::GENESIS,
            cc_voted: BTreeSet::new(),
            cc_voted_floor: 0,
            qc_high: genesis.clone(),
            qc_committed: genesis,
            proposals: BTreeMap::new(),
            qc_votes: BTreeMap::new(),
            qcs_formed: BTreeMap::new(),
            cc_votes: BTreeMap::new(),
            tc_votes: BTreeMap::new(),
            my_tc_vote: None,
            qc_vote_gen: 0,
            timeout_gen: 0,
            blocks: BlockStore::new(),
            linked: HashSet::default(),
            orphans: HashMap::default(),
            store: BatchStore::new(id, cfg.clone()),
            fetcher: Fetcher::new(id, cfg.delta),
            pending_two_chain: Vec::new(),
            pending_commits: VecDeque::new(),
            delivered_tip: BlockPrefix::genesis(),
            verified: VerifyCache::default(),
            keys,
            ring,
            cfg,
        }
    }

    /// Scales all timer durations, modelling a clock running at a different speed.
    pub fn set_timer_scale(&mut self, scale: f64) {
        self.timer_scale = scale;
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn config(&self) -> &Arc<ProtocolConfig> {
        &self.cfg
    }

    pub fn keys(&self) -> &KeyShareSet {
        &self.keys
    }

    pub fn ring(&self) -> &Arc<PublicKeyRing> {
        &self.ring
    }

    pub fn r_cur(&self) -> Round {
        self.r_cur
    }

    pub fn r_timeout(&self) -> Round {
        self.r_timeout
    }

    pub fn qc_high(&self) -> &Qc {
        &self.qc_high
    }

    pub fn qc_committed(&self) -> &Qc {
        &self.qc_committed
    }

    pub fn entry_reason(&self) -> &EntryReason {
        &self.entry_reason
    }

    pub fn proposal(&self, round: Round) -> Option<&Arc<Block>> {
        self.proposals.get(&round)
    }

    pub fn blocks(&self) -> &BlockStore {
        &self.blocks
    }

    pub fn batch_store(&self) -> &BatchStore {
        &self.store
    }

    pub fn fetch_requests_sent(&self) -> u64 {
        self.fetcher.requests_sent
    }

    /// Round of the last chain element whose batches were all delivered.
    pub fn delivered_round(&self) -> Round {
        self.delivered_tip.round
    }

    pub fn pending_commits(&self) -> usize {
        self.pending_commits.len()
    }

    pub fn snapshot(&self) -> ReplicaSnapshot {
        ReplicaSnapshot {
            r_cur: self.r_cur,
            r_timeout: self.r_timeout,
            qc_high: self.qc_high.rank(),
            qc_committed: self.qc_committed.rank(),
            last_qc_vote: self.last_qc_vote,
        }
    }

    fn scaled(&self, d: SimTime) -> SimTime {
        ((d as f64 * self.timer_scale).round() as SimTime).max(1)
    }

    fn m(&self) -> Prefix {
        self.cfg.m()
    }

    // ----- entry points -------------------------------------------------

    /// Enters round 1 and starts the batch timer.
    pub fn start(&mut self, now: SimTime, fx: &mut Effects) {
        self.now = now;
        self.try_advance_round(1, EntryReason::genesis(), fx);
        let offset = self.rng.random_range(0..self.cfg.batch_interval);
        fx.timer(Timer::BatchTick, offset);
    }

    pub fn on_client_tx(&mut self, tx: Transaction) {
        self.store.submit(tx);
    }

    pub fn on_timer(&mut self, timer: Timer, now: SimTime, fx: &mut Effects) {
        self.now = now;
        match timer {
            Timer::QcVote { round, gen } => {
                if gen == self.qc_vote_gen && round == self.r_cur {
                    if let Some(b) = self.proposals.get(&round).cloned() {
                        let available = self.store.available_prefix(&b);
                        fx.observe(Observation::QcVoteTimer { round, available });
                        self.fetch_missing_optimistic(&b, fx);
                    }
                    if self.policy.timer_votes() {
                        self.qc_vote(fx);
                    }
                }
            }
            Timer::RoundTimeout { gen } => {
                if gen == self.timeout_gen {
                    self.on_round_timeout(fx);
                }
            }
            Timer::BatchTick => {
                if let Some(batch) = self.store.create_batch(now) {
                    fx.observe(Observation::BatchCreated(batch.clone()));
                    fx.multicast(Message::Batch(batch));
                }
                fx.timer(Timer::BatchTick, self.cfg.batch_interval);
            }
            Timer::FetchRetry { id } => self.fetcher.on_timeout(id, fx),
        }
    }

    pub fn on_message(&mut self, from: ReplicaId, msg: &Message, now: SimTime, fx: &mut Effects) {
        self.now = now;
        match msg {
            Message::Batch(batch) => {
                let digest = batch.digest();
                match self.store.on_batch(from, batch.clone(), now, &self.keys, fx) {
                    BatchOutcome::Stored => {
                        self.fetcher.satisfied(&FetchItem::Batch(digest));
                        self.on_new_data(fx);
                    }
                    BatchOutcome::Invalid => fx.observe(Observation::Rejected { from, kind: msg.kind() }),
                    BatchOutcome::Duplicate | BatchOutcome::Equivocation => {}
                }
            }
            Message::PoaVote { sn, sig } => {
                if let Some(poa) = self.store.on_poa_vote(from, *sn, *sig, &self.ring) {
                    fx.multicast(Message::Poa(poa));
                }
            }
            Message::Poa(poa) => {
                if self.verify_poa(poa) {
                    self.on_poa(poa.clone(), fx);
                } else {
                    fx.observe(Observation::Rejected { from, kind: msg.kind() });
                }
            }
            Message::FetchRequest { id, items } => self.serve_fetch(from, *id, items, fx),
            Message::FetchResponse { id, blocks, batches } => {
                for block in blocks {
                    if self.verify_block(block) {
                        self.insert_block(block.clone(), None, fx);
                    }
                }
                for batch in batches {
                    if batch.is_well_formed() {
                        let digest = batch.digest();
                        self.store.insert_content(batch.clone(), now);
                        self.fetcher.satisfied(&FetchItem::Batch(digest));
                    }
                }
                self.fetcher.on_response(*id, fx);
                self.on_new_data(fx);
            }
            Message::Propose(block) => {
                if self.verify_block(block) {
                    self.on_propose(from, block.clone(), fx);
                } else {
                    fx.observe(Observation::Rejected { from, kind: msg.kind() });
                }
            }
            Message::AdvanceRound(reason) => {
                if self.verify_reason(reason) {
                    self.on_new_qc(reason.qc().clone(), fx);
                    self.try_advance_round(reason.round(), reason.clone(), fx);
                } else {
                    fx.observe(Observation::Rejected { from, kind: msg.kind() });
                }
            }
            Message::QcVote { round, prefix, hash, sig } => {
                let msg_bytes = signing::qc_vote(hash, *round, *prefix);
                if *prefix <= self.m() && self.pver_from(from, *prefix, &msg_bytes, sig) {
                    self.on_qc_vote(from, *round, *prefix, *hash, *sig, fx);
                } else {
                    fx.observe(Observation::Rejected { from, kind: msg.kind() });
                }
            }
            Message::CcVote { qc, sig } => {
                let msg_bytes = signing::cc_vote(&qc.hash(), qc.round(), qc.prefix());
                if self.verify_qc(qc) && self.pver_from(from, qc.prefix(), &msg_bytes, sig) {
                    self.on_cc_vote(from, qc.clone(), *sig, fx);
                } else {
                    fx.observe(Observation::Rejected { from, kind: msg.kind() });
                }
            }
            Message::TcVote { round, reason, qc, sig } => {
                let msg_bytes = signing::tc_vote(*round, qc.rank());
                let ok = reason.round() == *round
                    && self.verify_reason(reason)
                    && self.verify_qc(qc)
                    && self.pver_from(from, UNTAGGED, &msg_bytes, sig);
                if ok {
                    self.on_tc_vote(from, *round, reason.clone(), qc.clone(), *sig, fx);
                } else {
                    fx.observe(Observation::Rejected { from, kind: msg.kind() });
                }
            }
        }
    }

    // ----- verification -------------------------------------------------

    fn pver_from(&self, from: ReplicaId, tag: Prefix, msg: &[u8], sig: &PartialSignature) -> bool {
        sig.signer == from && self.ring.share(from, tag).is_some_and(|pk| pver(pk, tag, msg, sig))
    }

    fn verify_qc(&mut self, qc: &Qc) -> bool {
        let (cfg, ring) = (&self.cfg, &self.ring);
        self.verified.check(qc, Keep::Qc, |q| q.verify(cfg, ring))
    }

    fn verify_poa(&mut self, poa: &Arc<ProofOfAvailability>) -> bool {
        let (cfg, ring) = (&self.cfg, &self.ring);
        self.verified.check(poa, Keep::Poa, |p| p.verify(cfg, ring))
    }

    fn verify_reason(&mut self, reason: &EntryReason) -> bool {
        if !reason.is_consistent(self.m()) || !self.verify_qc(reason.qc()) {
            return false;
        }
        let (cfg, ring) = (&self.cfg, &self.ring);
        match reason {
            EntryReason::FullQc(_) => true,
            EntryReason::Cc(cc, _) => self.verified.check(cc, Keep::Cc, |c| c.verify(cfg, ring)),
            EntryReason::Tc(tc, _) => self.verified.check(tc, Keep::Tc, |t| t.verify(cfg, ring)),
        }
    }

    fn verify_block(&mut self, block: &Arc<Block>) -> bool {
        if self.blocks.get(&block.digest()).is_some() {
            return true;
        }
        block.is_well_formed(&self.cfg)
            && self.verify_reason(block.entry_reason())
            && block.payload().poas.iter().all(|p| self.verify_poa(p))
    }

    // ----- rounds -------------------------------------------------------

    fn try_advance_round(&mut self, round: Round, reason: EntryReason, fx: &mut Effects) {
        if reason.round() != round || round <= self.r_cur {
            return;
        }
        self.r_cur = round;
        let kind = match &reason {
            EntryReason::FullQc(_) => ReasonKind::FullQc,
            EntryReason::Cc(..) => ReasonKind::Cc,
            EntryReason::Tc(..) => ReasonKind::Tc,
        };
        self.entry_reason = reason.clone();
        fx.observe(Observation::EnteredRound { round, reason: kind });
        let leader = self.cfg.leader(round);
        if leader == self.id {
            self.propose(round, reason, fx);
        } else {
            fx.send(leader, Message::AdvanceRound(reason));
        }
        self.qc_vote_gen += 1;
        self.timeout_gen += 1;
        let timeout = self.scaled(self.cfg.round_timeout());
        fx.timer(Timer::RoundTimeout { gen: self.timeout_gen }, timeout);
        self.collect_garbage();
    }

    fn collect_garbage(&mut self) {
        let floor = self.r_cur.saturating_sub(2);
        self.qc_votes = self.qc_votes.split_off(&floor);
        self.cc_votes = self.cc_votes.split_off(&floor);
        self.tc_votes = self.tc_votes.split_off(&floor);
        self.qcs_formed = self.qcs_formed.split_off(&floor);
        self.proposals = self.proposals.split_off(&floor);
        // Rounds below the floor count as CC-voted: voting less is always safe.
        self.cc_voted = self.cc_voted.split_off(&floor);
        self.cc_voted_floor = self.cc_voted_floor.max(floor);
    }

    fn has_cc_voted(&self, round: Round) -> bool {
        round < self.cc_voted_floor || self.cc_voted.contains(&round)
    }

    fn propose(&mut self, round: Round, reason: EntryReason, fx: &mut Effects) {
        let parent = reason.qc().clone();
        let in_chain = self.undelivered_chain_batches(&parent);
        let optimistic = in_chain.is_some() && self.policy.optimistic_payload(reason.is_tc());
        let (payload, ready) = self.store.get_payload(&in_chain.unwrap_or_default(), self.now, optimistic);
        let block = Arc::new(Block::new(round, reason, payload));
        fx.observe(Observation::Proposed { block: block.clone(), ready });
        fx.multicast(Message::Propose(block));
    }

    /// Batches referenced by `chain(qc)` beyond what has been delivered.
    /// `None` if some block of that segment is not available locally.
    fn undelivered_chain_batches(&self, qc: &QuorumCertificate) -> Option<HashSet<BatchKey>> {
        let mut keys = HashSet::default();
        let mut cur = BlockPrefix::of_qc(qc);
        while !cur.is_genesis() && cur.round >= self.delivered_tip.round {
            let block = self.blocks.get(&cur.block)?;
            keys.extend(element_batches(block, cur.prefix).into_iter().map(|(k, _)| k));
            if cur.block == self.delivered_tip.block {
                break;
            }
            cur = BlockPrefix::of_qc(block.qc_parent());
        }
        Some(keys)
    }

    fn on_propose(&mut self, from: ReplicaId, block: Arc<Block>, fx: &mut Effects) {
        self.insert_block(block.clone(), Some(from), fx);
        self.on_new_qc(block.qc_parent().clone(), fx);
        let round = block.round();
        let accept = from == self.cfg.leader(round)
            && round >= self.r_cur
            && round > self.r_timeout
            && !self.proposals.contains_key(&round)
            && block.entry_reason().round() == round;
        if !accept {
            return;
        }
        self.proposals.insert(round, block.clone());
        self.try_advance_round(round, block.entry_reason().clone(), fx);
        self.qc_vote_gen += 1;
        let delay = self.scaled(self.cfg.qc_vote_delay());
        fx.timer(Timer::QcVote { round, gen: self.qc_vote_gen }, delay);
        self.check_full_availability(fx);
    }

    /// Votes with prefix `M` as soon as the current proposal is fully local.
    fn check_full_availability(&mut self, fx: &mut Effects) {
        if let Some(block) = self.proposals.get(&self.r_cur) {
            if self.store.available_prefix(block) == self.m() {
                self.qc_vote(fx);
            }
        }
    }

    fn qc_vote(&mut self, fx: &mut Effects) {
        let round = self.r_cur;
        let Some(block) = self.proposals.get(&round) else { return };
        if round <= self.r_timeout {
            return;
        }
        let Some(prefix) = self.policy.vote_prefix(self.store.available_prefix(block)) else { return };
        let rank = Rank::new(round, prefix);
        if self.last_qc_vote >= rank {
            return;
        }
        self.last_qc_vote = rank;
        let hash = block.digest();
        let sig = self.keys.psign(prefix, &signing::qc_vote(&hash, round, prefix)).expect("prefix within [0, M]");
        fx.observe(Observation::QcVoted { round, prefix, hash });
        fx.multicast(Message::QcVote { round, prefix, hash, sig });
    }

    fn on_qc_vote(
        &mut self,
        from: ReplicaId,
        round: Round,
        prefix: Prefix,
        hash: Digest,
        sig: PartialSignature,
        fx: &mut Effects,
    ) {
        if round < self.r_cur {
            return;
        }
        let votes = self.qc_votes.entry(round).or_default().entry(hash).or_default();
        if votes.get(&from).is_some_and(|(p, _)| *p >= prefix) {
            return;
        }
        votes.insert(from, (prefix, sig));
        if votes.len() < self.cfg.quorum() {
            return;
        }
        let m = self.cfg.m();
        let full = votes.values().filter(|(p, _)| *p == m).count();
        if !(self.qc_high.round() < round || full >= self.cfg.s()) {
            return;
        }
        let s = self.cfg.s();
        let cp = certified_prefix(votes.values().map(|(p, _)| *p), s).expect("quorum exceeds S");
        // A QC no higher than one already formed here for this round adds nothing.
        if self.qcs_formed.get(&round).is_some_and(|r| *r >= Rank::new(round, cp)) {
            return;
        }
        let parts: Vec<PartialSignature> = votes.values().map(|(_, s)| *s).collect();
        let vote_prefixes: Vec<(ReplicaId, Prefix)> = votes.iter().map(|(q, (p, _))| (*q, *p)).collect();
        let Some(agg) = combine(&parts) else { return };
        let Ok(qc) = QuorumCertificate::new(round, hash, vote_prefixes, agg, s) else { return };
        self.qcs_formed.insert(round, qc.rank());
        let qc = Arc::new(qc);
        fx.observe(Observation::QcFormed(qc.clone()));
        self.on_new_qc(qc, fx);
    }

    fn on_new_qc(&mut self, qc: Qc, fx: &mut Effects) {
        if self.policy.order_key(&qc) > self.policy.order_key(&self.qc_high) {
            self.qc_high = qc.clone();
        }
        let round = qc.round();
        if !self.has_cc_voted(round) && round > self.r_timeout {
            self.cc_voted.insert(round);
            let sig = self
                .keys
                .psign(qc.prefix(), &signing::cc_vote(&qc.hash(), round, qc.prefix()))
                .expect("prefix within [0, M]");
            fx.observe(Observation::CcVoted { round, qc: qc.rank() });
            fx.multicast(Message::CcVote { qc: qc.clone(), sig });
        }
        if qc.prefix() == self.m() && !qc.is_genesis() {
            self.try_advance_round(round + 1, EntryReason::FullQc(qc.clone()), fx);
        }
        self.fetch_chain_blocks(&qc, fx);
        if self.cfg.two_chain_commit {
            self.two_chain_commit(qc, fx);
        }
        self.try_deliver(fx);
    }

    /// Commits `B.qc_parent` for the highest block `B` of `chain(qc)` whose
    /// parent QC is from the adjacent round.
    fn two_chain_commit(&mut self, qc: Qc, fx: &mut Effects) {
        if qc.is_genesis() {
            return;
        }
        if !self.linked.contains(&qc.hash()) {
            if !self.pending_two_chain.iter().any(|p| Arc::ptr_eq(p, &qc)) {
                self.pending_two_chain.push(qc);
            }
            return;
        }
        let mut cur = qc.hash();
        while cur != genesis_digest() {
            let block = self.blocks.get(&cur).expect("linked blocks are local").clone();
            let parent = block.qc_parent();
            if self.policy.order_key(parent) <= self.policy.order_key(&self.qc_committed) {
                return;
            }
            if block.round() == parent.round() + 1 {
                self.commit_qc(parent.clone(), fx);
                return;
            }
            cur = parent.hash();
        }
    }

    fn on_cc_vote(&mut self, from: ReplicaId, qc: Qc, sig: PartialSignature, fx: &mut Effects) {
        self.on_new_qc(qc.clone(), fx);
        let round = qc.round();
        if round < self.r_cur.saturating_sub(2) {
            return;
        }
        let votes = self.cc_votes.entry(round).or_default();
        votes.entry(from).or_insert((qc, sig));
        let quorum = self.cfg.quorum();
        if votes.len() < quorum {
            return;
        }
        let policy = self.policy;
        let mut selected: Vec<(ReplicaId, Qc, PartialSignature)> =
            votes.iter().map(|(q, (c, s))| (*q, c.clone(), *s)).collect();
        // Highest QCs first; ties by digest, then lowest replica id.
        selected.sort_by(|a, b| {
            (policy.order_key(&b.1), b.1.rank())
                .cmp(&(policy.order_key(&a.1), a.1.rank()))
                .then(a.1.hash().cmp(&b.1.hash()))
                .then(a.0.cmp(&b.0))
        });
        selected.truncate(quorum);
        let qc_max = selected[0].1.clone();
        let qc_min = selected[quorum - 1].1.clone();
        if policy.order_key(&qc_min) <= policy.order_key(&self.qc_committed) {
            return;
        }
        let parts: Vec<PartialSignature> = selected.iter().map(|v| v.2).collect();
        let prefixes: Vec<(ReplicaId, Prefix)> = selected.iter().map(|v| (v.0, v.1.prefix())).collect();
        let Some(agg) = combine(&parts) else { return };
        let Ok(cc) = CommitCertificate::new(round, qc_max.hash(), prefixes, agg) else { return };
        self.commit_qc(qc_min, fx);
        self.try_advance_round(round + 1, EntryReason::Cc(Arc::new(cc), qc_max), fx);
        self.try_deliver(fx);
    }

    fn on_round_timeout(&mut self, fx: &mut Effects) {
        if self.r_timeout < self.r_cur {
            self.r_timeout = self.r_cur;
            let round = self.r_cur;
            let sig = self.keys.psign(UNTAGGED, &signing::tc_vote(round, self.qc_high.rank())).expect("untagged share");
            let msg =
                Arc::new(Message::TcVote { round, reason: self.entry_reason.clone(), qc: self.qc_high.clone(), sig });
            self.my_tc_vote = Some((round, msg.clone()));
            fx.observe(Observation::TcVoted { round, retransmit: false });
            fx.multicast_shared(msg);
        } else if let Some((round, msg)) = &self.my_tc_vote {
            // Still stuck in the round we timed out in: repeat the same vote
            // in case it was lost.
            if *round == self.r_cur {
                fx.observe(Observation::TcVoted { round: *round, retransmit: true });
                fx.multicast_shared(msg.clone());
            }
        }
        let timeout = self.scaled(self.cfg.round_timeout());
        fx.timer(Timer::RoundTimeout { gen: self.timeout_gen }, timeout);
    }

    fn on_tc_vote(
        &mut self,
        from: ReplicaId,
        round: Round,
        reason: EntryReason,
        qc: Qc,
        sig: PartialSignature,
        fx: &mut Effects,
    ) {
        self.on_new_qc(qc.clone(), fx);
        self.try_advance_round(round, reason, fx);
        if round < self.r_cur.saturating_sub(2) {
            return;
        }
        let votes = self.tc_votes.entry(round).or_default();
        if votes.contains_key(&from) {
            return;
        }
        votes.insert(from, (qc, sig));
        if votes.len() != self.cfg.quorum() {
            return;
        }
        let data: Vec<(ReplicaId, Rank)> = votes.iter().map(|(q, (c, _))| (*q, c.rank())).collect();
        let parts: Vec<PartialSignature> = votes.values().map(|(_, s)| *s).collect();
        let qc_max = votes
            .iter()
            .max_by(|a, b| a.1 .0.rank().cmp(&b.1 .0.rank()).then(b.1 .0.hash().cmp(&a.1 .0.hash())).then(b.0.cmp(a.0)))
            .map(|(_, (c, _))| c.clone())
            .expect("quorum is non-empty");
        let Some(agg) = combine(&parts) else { return };
        let Ok(tc) = TimeoutCertificate::new(round, data, agg) else { return };
        fx.observe(Observation::TcFormed { round });
        self.try_advance_round(round + 1, EntryReason::Tc(Arc::new(tc), qc_max), fx);
    }

    // ----- commit and delivery -----------------------------------------

    fn commit_qc(&mut self, qc: Qc, fx: &mut Effects) {
        if self.policy.order_key(&qc) <= self.policy.order_key(&self.qc_committed) {
            return;
        }
        fx.observe(Observation::Committed(qc.clone()));
        self.qc_committed = qc.clone();
        self.pending_commits.push_back(qc);
    }

    /// Delivers committed chains whose data is local, fetching what is missing.
    fn try_deliver(&mut self, fx: &mut Effects) {
        while let Some(qc) = self.pending_commits.front().cloned() {
            let segment = match self.segment_to_deliver(&qc) {
                Ok(seg) => seg,
                Err((missing, hints)) => {
                    self.fetcher.want(FetchItem::Block(missing), hints, &mut self.rng);
                    self.fetcher.dispatch(fx);
                    return;
                }
            };
            let mut missing = false;
            for (element, block, certifier) in &segment {
                for (i, group) in block.payload().sub_blocks.iter().enumerate().take(element.prefix as usize) {
                    for info in group {
                        if !self.store.is_delivered(&info.key()) && !self.store.contains(&info.digest) {
                            let mut hints: Vec<ReplicaId> = certifier.holders_of(i as Prefix + 1).collect();
                            hints.push(info.author);
                            hints.push(self.cfg.leader(block.round()));
                            self.fetcher.want(FetchItem::Batch(info.digest), hints, &mut self.rng);
                            missing = true;
                        }
                    }
                }
                for poa in &block.payload().poas {
                    if !self.store.is_delivered(&poa.key()) && !self.store.contains(&poa.digest()) {
                        let hints = poa.votes().to_vec();
                        self.fetcher.want(FetchItem::Batch(poa.digest()), hints, &mut self.rng);
                        missing = true;
                    }
                }
            }
            if missing {
                self.fetcher.dispatch(fx);
                return;
            }
            for (element, block, _) in &segment {
                for (_, digest) in element_batches(block, element.prefix) {
                    let batch: Arc<Batch> = self.store.get(&digest).expect("checked above").clone();
                    if self.store.mark_delivered(&batch, element.round) {
                        fx.deliver(batch, element.round);
                    }
                }
            }
            self.delivered_tip = BlockPrefix::of_qc(&qc);
            self.pending_commits.pop_front();
        }
    }

    /// Chain elements of `qc` not yet fully delivered, oldest first, each
    /// with the QC that certifies it. On a missing block returns its digest
    /// and fetch hints.
    #[allow(clippy::type_complexity)]
    fn segment_to_deliver(&self, qc: &Qc) -> Result<Vec<(BlockPrefix, Arc<Block>, Qc)>, (Digest, Vec<ReplicaId>)> {
        let mut out = Vec::new();
        let mut cur = BlockPrefix::of_qc(qc);
        let mut certifier = qc.clone();
        while !cur.is_genesis() && cur.round >= self.delivered_tip.round {
            let Some(block) = self.blocks.get(&cur.block) else {
                let mut hints: Vec<ReplicaId> = certifier.vote_prefixes().iter().map(|v| v.0).collect();
                hints.push(self.cfg.leader(cur.round));
                return Err((cur.block, hints));
            };
            out.push((cur, block.clone(), certifier.clone()));
            if cur.block == self.delivered_tip.block {
                break;
            }
            certifier = block.qc_parent().clone();
            cur = BlockPrefix::of_qc(&certifier);
        }
        out.reverse();
        Ok(out)
    }

    // ----- data plane ---------------------------------------------------

    fn on_poa(&mut self, poa: Arc<ProofOfAvailability>, fx: &mut Effects) {
        if self.store.add_poa(poa.clone(), self.now) && !self.store.contains(&poa.digest()) {
            self.fetcher.want(FetchItem::Batch(poa.digest()), poa.votes().iter().copied(), &mut self.rng);
            self.fetcher.dispatch(fx);
        }
    }

    /// Stores a verified block. For proposals (`proposer` set), requests
    /// missing PoA batches.
    fn insert_block(&mut self, block: Arc<Block>, proposer: Option<ReplicaId>, fx: &mut Effects) {
        let digest = block.digest();
        if !self.blocks.insert(block.clone()) {
            return;
        }
        self.fetcher.satisfied(&FetchItem::Block(digest));
        for poa in &block.payload().poas {
            if self.store.add_poa(poa.clone(), self.now) && proposer.is_some() && !self.store.contains(&poa.digest()) {
                self.fetcher.want(FetchItem::Batch(poa.digest()), poa.votes().iter().copied(), &mut self.rng);
            }
        }
        let parent = block.qc_parent().clone();
        if parent.is_genesis() || self.linked.contains(&parent.hash()) {
            self.link(digest);
        } else {
            self.orphans.entry(parent.hash()).or_default().push(digest);
            let mut hints: Vec<ReplicaId> = parent.vote_prefixes().iter().map(|v| v.0).collect();
            hints.push(self.cfg.leader(parent.round()));
            if let Some(p) = proposer {
                hints.push(p);
            }
            if !self.blocks.contains(&parent.hash()) {
                self.fetcher.want(FetchItem::Block(parent.hash()), hints, &mut self.rng);
            }
        }
        self.fetcher.dispatch(fx);
    }

    /// Requests optimistic batches of a proposal that are still missing.
    /// Runs at the QC-vote timer rather than on receipt, since most batches
    /// referenced by a fresh proposal are still in flight.
    fn fetch_missing_optimistic(&mut self, block: &Block, fx: &mut Effects) {
        let leader = self.cfg.leader(block.round());
        for info in block.payload().optimistic() {
            if !self.store.contains(&info.digest) && !self.store.is_delivered(&info.key()) {
                self.fetcher.want(FetchItem::Batch(info.digest), [info.author, leader], &mut self.rng);
            }
        }
        self.fetcher.dispatch(fx);
    }

    fn link(&mut self, digest: Digest) {
        let mut stack = vec![digest];
        while let Some(d) = stack.pop() {
            if self.linked.insert(d) {
                if let Some(children) = self.orphans.remove(&d) {
                    stack.extend(children);
                }
            }
        }
    }

    /// Requests blocks missing from `chain(qc)`.
    fn fetch_chain_blocks(&mut self, qc: &Qc, fx: &mut Effects) {
        if qc.is_genesis() || self.linked.contains(&qc.hash()) {
            return;
        }
        let mut certifier = qc.clone();
        loop {
            let digest = certifier.hash();
            if certifier.is_genesis() || self.linked.contains(&digest) {
                return;
            }
            match self.blocks.get(&digest) {
                Some(block) => certifier = block.qc_parent().clone(),
                None => {
                    let mut hints: Vec<ReplicaId> = certifier.vote_prefixes().iter().map(|v| v.0).collect();
                    hints.push(self.cfg.leader(certifier.round()));
                    self.fetcher.want(FetchItem::Block(digest), hints, &mut self.rng);
                    self.fetcher.dispatch(fx);
                    return;
                }
            }
        }
    }

    fn serve_fetch(&mut self, from: ReplicaId, id: u64, items: &[FetchItem], fx: &mut Effects) {
        let mut blocks = Vec::new();
        let mut batches = Vec::new();
        for item in items {
            match item {
                FetchItem::Block(d) => {
                    if let Some(b) = self.blocks.get(d) {
                        blocks.push(b.clone());
                    }
                }
                FetchItem::Batch(d) => {
                    if let Some(b) = self.store.get(d) {
                        batches.push(b.clone());
                    }
                }
            }
        }
        fx.send(from, Message::FetchResponse { id, blocks, batches });
    }

    /// Re-evaluates conditions that wait on data arriving.
    fn on_new_data(&mut self, fx: &mut Effects) {
        if !self.pending_two_chain.is_empty() {
            let pending = std::mem::take(&mut self.pending_two_chain);
            for qc in pending {
                if self.policy.order_key(&qc) > self.policy.order_key(&self.qc_committed) {
                    self.two_chain_commit(qc, fx);
                }
            }
        }
        self.try_deliver(fx);
        self.check_full_availability(fx);
    }

    /// Drops batch contents delivered before `round`.
    pub fn prune(&mut self, round: Round) {
        self.store.prune_delivered(round);
    }

    /// Test hook: commits `qc` on `block` without any certificate checks,
    /// bypassing the protocol. Used to check that the observer notices.
    #[doc(hidden)]
    pub fn inject_commit(&mut self, block: Arc<Block>, qc: Qc, fx: &mut Effects) {
        self.blocks.insert(block.clone());
        let parent = block.qc_parent().hash();
        if parent == genesis_digest() || self.linked.contains(&parent) {
            self.link(block.digest());
        }
        self.commit_qc(qc, fx);
        self.try_deliver(fx);
    }
}
