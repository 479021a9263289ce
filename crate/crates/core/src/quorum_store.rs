//! Batch dissemination, proofs of availability and data fetching.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustc_hash::{FxHashMap as HashMap, FxHashSet as HashSet};

use crate::block::{BatchLookup, Block, BlockPayload};
use crate::cert::{signing, ProofOfAvailability, UNTAGGED};
use crate::codec::Digest;
use crate::crypto::{combine, pver, KeyShareSet, PartialSignature, PublicKeyRing};
use crate::effects::{Effects, Observation, Timer};
use crate::message::{FetchItem, Message};
use crate::types::{Batch, BatchKey, Prefix, ProtocolConfig, ReplicaId, Round, SeqNum, SimTime, Transaction};

/// Outcome of receiving an `mBatch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchOutcome {
    Stored,
    Duplicate,
    Equivocation,
    Invalid,
}

/// Local batch storage and PoA bookkeeping.
pub struct BatchStore {
    me: ReplicaId,
    cfg: Arc<ProtocolConfig>,
    batches: HashMap<Digest, Arc<Batch>>,
    received_at: HashMap<Digest, SimTime>,
    first_digest: HashMap<BatchKey, Digest>,
    voted: HashSet<BatchKey>,
    equivocators: BTreeSet<ReplicaId>,
    my_batches: BTreeMap<SeqNum, Arc<Batch>>,
    poa_votes: HashMap<SeqNum, BTreeMap<ReplicaId, PartialSignature>>,
    poa_formed: HashSet<SeqNum>,
    poas: BTreeMap<BatchKey, (Arc<ProofOfAvailability>, SimTime)>,
    /// Stored batches not yet delivered, by key.
    undelivered: BTreeMap<BatchKey, Digest>,
    delivered: HashSet<BatchKey>,
    delivered_log: VecDeque<(Round, Digest)>,
    mempool: VecDeque<Transaction>,
    next_sn: SeqNum,
    pub strikes: HashMap<ReplicaId, u32>,
}

impl BatchLookup for BatchStore {
    fn batch(&self, digest: &Digest) -> Option<&Arc<Batch>> {
        self.batches.get(digest)
    }
}

impl BatchStore {
    pub fn new(me: ReplicaId, cfg: Arc<ProtocolConfig>) -> Self {
        BatchStore {
            me,
            cfg,
            batches: HashMap::default(),
            received_at: HashMap::default(),
            first_digest: HashMap::default(),
            voted: HashSet::default(),
            equivocators: BTreeSet::new(),
            my_batches: BTreeMap::new(),
            poa_votes: HashMap::default(),
            poa_formed: HashSet::default(),
            poas: BTreeMap::new(),
            undelivered: BTreeMap::new(),
            delivered: HashSet::default(),
            delivered_log: VecDeque::new(),
            mempool: VecDeque::new(),
            next_sn: 1,
            strikes: HashMap::default(),
        }
    }

    pub fn submit(&mut self, tx: Transaction) {
        self.mempool.push_back(tx);
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.batches.contains_key(digest)
    }

    pub fn get(&self, digest: &Digest) -> Option<&Arc<Batch>> {
        self.batches.get(digest)
    }

    pub fn my_batch(&self, sn: SeqNum) -> Option<&Arc<Batch>> {
        self.my_batches.get(&sn)
    }

    pub fn is_equivocator(&self, author: ReplicaId) -> bool {
        self.equivocators.contains(&author)
    }

    pub fn is_delivered(&self, key: &BatchKey) -> bool {
        self.delivered.contains(key)
    }

    pub fn poa(&self, key: &BatchKey) -> Option<&Arc<ProofOfAvailability>> {
        self.poas.get(key).map(|(p, _)| p)
    }

    pub fn poa_count(&self) -> usize {
        self.poas.len()
    }

    /// Cuts a batch from the mempool; empty mempools produce nothing.
    pub fn create_batch(&mut self, now: SimTime) -> Option<Arc<Batch>> {
        if self.mempool.is_empty() {
            return None;
        }
        let take = self.mempool.len().min(self.cfg.batch_capacity);
        let txs: Vec<Transaction> = self.mempool.drain(..take).collect();
        let sn = self.next_sn;
        self.next_sn += 1;
        let batch = Arc::new(Batch::new(self.me, sn, now, txs));
        self.my_batches.insert(sn, batch.clone());
        Some(batch)
    }

    /// Stores content obtained by any means. Returns true if it was new.
    pub fn insert_content(&mut self, batch: Arc<Batch>, now: SimTime) -> bool {
        let digest = batch.digest();
        if self.batches.contains_key(&digest) {
            return false;
        }
        let key = batch.key();
        self.first_digest.entry(key).or_insert(digest);
        if !self.delivered.contains(&key) {
            self.undelivered.entry(key).or_insert(digest);
        }
        self.received_at.insert(digest, now);
        self.batches.insert(digest, batch);
        true
    }

    /// Handles an `mBatch` from `from`; on success signs a PoA vote.
    pub fn on_batch(
        &mut self,
        from: ReplicaId,
        batch: Arc<Batch>,
        now: SimTime,
        keys: &KeyShareSet,
        fx: &mut Effects,
    ) -> BatchOutcome {
        if batch.author != from || !batch.is_well_formed() {
            return BatchOutcome::Invalid;
        }
        let key = batch.key();
        if let Some(first) = self.first_digest.get(&key) {
            if *first != batch.digest() {
                if self.equivocators.insert(from) {
                    fx.observe(Observation::Equivocation { author: from });
                }
                return BatchOutcome::Equivocation;
            }
        }
        if !self.voted.insert(key) {
            return BatchOutcome::Duplicate;
        }
        let digest = batch.digest();
        let (sn, author) = (batch.sn, batch.author);
        self.insert_content(batch, now);
        let sig = keys.psign(UNTAGGED, &signing::poa_vote(&digest, sn, author)).expect("untagged share exists");
        fx.send(author, Message::PoaVote { sn, sig });
        BatchOutcome::Stored
    }

    /// Collects a PoA vote for one of our batches. Returns the PoA when the
    /// quorum is reached for the first time.
    pub fn on_poa_vote(
        &mut self,
        from: ReplicaId,
        sn: SeqNum,
        sig: PartialSignature,
        ring: &PublicKeyRing,
    ) -> Option<Arc<ProofOfAvailability>> {
        let batch = self.my_batches.get(&sn)?.clone();
        let msg = signing::poa_vote(&batch.digest(), sn, self.me);
        let valid = sig.signer == from && ring.share(from, UNTAGGED).is_some_and(|pk| pver(pk, UNTAGGED, &msg, &sig));
        if !valid {
            *self.strikes.entry(from).or_default() += 1;
            return None;
        }
        if self.poa_formed.contains(&sn) {
            return None;
        }
        let votes = self.poa_votes.entry(sn).or_default();
        votes.insert(from, sig);
        if votes.len() < self.cfg.quorum() {
            return None;
        }
        let parts: Vec<PartialSignature> = votes.values().copied().collect();
        let voters: Vec<ReplicaId> = votes.keys().copied().collect();
        let agg = combine(&parts)?;
        let poa = ProofOfAvailability::new(batch.digest(), sn, self.me, voters, agg).ok()?;
        self.poa_formed.insert(sn);
        self.poa_votes.remove(&sn);
        Some(Arc::new(poa))
    }

    /// Records a verified PoA. Returns true if it was new.
    pub fn add_poa(&mut self, poa: Arc<ProofOfAvailability>, now: SimTime) -> bool {
        let key = poa.key();
        if self.delivered.contains(&key) || self.poas.contains_key(&key) {
            return false;
        }
        self.poas.insert(key, (poa, now));
        true
    }

    /// Length of the longest prefix of sub-blocks whose batches are all local.
    pub fn available_prefix(&self, block: &Block) -> Prefix {
        let mut k = 0;
        for group in &block.payload().sub_blocks {
            if group.iter().all(|b| self.batches.contains_key(&b.digest)) {
                k += 1;
            } else {
                break;
            }
        }
        k
    }

    /// Builds a payload from everything not delivered and not in `exclude`.
    /// Also returns, per included batch, when it became includable here.
    pub fn get_payload(
        &self,
        exclude: &HashSet<BatchKey>,
        now: SimTime,
        optimistic: bool,
    ) -> (BlockPayload, Vec<(BatchKey, SimTime)>) {
        let m = self.cfg.m();
        let mut payload = BlockPayload::empty(m);
        let mut ready = Vec::new();
        for (key, (poa, at)) in &self.poas {
            if !exclude.contains(key) && !self.delivered.contains(key) {
                payload.poas.push(poa.clone());
                ready.push((*key, *at));
            }
        }
        if optimistic {
            let min_age = self.cfg.min_batch_age;
            let mut chosen = Vec::new();
            for (key, digest) in &self.undelivered {
                if exclude.contains(key) || self.poas.contains_key(key) || self.equivocators.contains(&key.author) {
                    continue;
                }
                let batch = &self.batches[digest];
                if now.saturating_sub(batch.created_at) < min_age {
                    continue;
                }
                let at = self.received_at[digest].max(batch.created_at + min_age);
                chosen.push((self.received_at[digest], *key, batch.info(), at));
            }
            // Oldest first, so batches that just arrived end up in the last sub-blocks.
            chosen.sort_by_key(|(received, key, _, _)| (*received, *key));
            ready.extend(chosen.iter().map(|(_, key, _, at)| (*key, *at)));
            payload.sub_blocks = split_groups(chosen.into_iter().map(|(_, _, info, _)| info).collect(), m);
        }
        (payload, ready)
    }

    pub fn mark_delivered(&mut self, batch: &Batch, round: Round) -> bool {
        let key = batch.key();
        if !self.delivered.insert(key) {
            return false;
        }
        self.undelivered.remove(&key);
        self.poas.remove(&key);
        self.delivered_log.push_back((round, batch.digest()));
        true
    }

    /// Drops contents of batches delivered in rounds before `round`.
    pub fn prune_delivered(&mut self, round: Round) {
        while let Some(&(r, digest)) = self.delivered_log.front() {
            if r >= round {
                break;
            }
            self.delivered_log.pop_front();
            self.batches.remove(&digest);
            self.received_at.remove(&digest);
        }
        self.my_batches.retain(|_, b| !self.delivered.contains(&b.key()) || self.batches.contains_key(&b.digest()));
    }

    pub fn stored_batches(&self) -> usize {
        self.batches.len()
    }
}

/// Splits `items` into `m` contiguous groups whose sizes differ by at most one.
pub fn split_groups<T>(items: Vec<T>, m: Prefix) -> Vec<Vec<T>> {
    let m = m as usize;
    let total = items.len();
    let (base, extra) = (total / m, total % m);
    let mut out = Vec::with_capacity(m);
    let mut it = items.into_iter();
    for i in 0..m {
        let size = base + usize::from(i < extra);
        out.push(it.by_ref().take(size).collect());
    }
    out
}

struct FetchEntry {
    hints: Vec<ReplicaId>,
    next_hint: usize,
    attempts: u32,
    in_flight: Option<u64>,
}

/// Retrieves missing blocks and batches from hinted replicas.
///
/// Each request waits `2Δ` for an answer. A negative or missing answer moves
/// the item to its next hint; after every hint has been tried the timeout
/// doubles, capped at eight times the base. Learning a new hint restarts
/// the item at that hint.
pub struct Fetcher {
    me: ReplicaId,
    base_timeout: SimTime,
    next_id: u64,
    entries: BTreeMap<FetchItem, FetchEntry>,
    requests: HashMap<u64, Vec<FetchItem>>,
    pub requests_sent: u64,
}

impl Fetcher {
    pub fn new(me: ReplicaId, delta: SimTime) -> Self {
        Fetcher {
            me,
            base_timeout: 2 * delta,
            next_id: 1,
            entries: BTreeMap::new(),
            requests: HashMap::default(),
            requests_sent: 0,
        }
    }

    pub fn is_pending(&self, item: &FetchItem) -> bool {
        self.entries.contains_key(item)
    }

    pub fn pending(&self) -> usize {
        self.entries.len()
    }

    /// Registers items to fetch with hints; merges hints for known items.
    pub fn want(&mut self, item: FetchItem, hints: impl IntoIterator<Item = ReplicaId>, rng: &mut ChaCha8Rng) {
        let me = self.me;
        let entry = self.entries.entry(item).or_insert_with(|| FetchEntry {
            hints: Vec::new(),
            next_hint: 0,
            attempts: 0,
            in_flight: None,
        });
        let fresh = entry.hints.is_empty();
        let known = entry.hints.len();
        for h in hints {
            if h != me && !entry.hints.contains(&h) {
                entry.hints.push(h);
            }
        }
        if fresh && !entry.hints.is_empty() {
            entry.next_hint = rng.random_range(0..entry.hints.len());
        } else if entry.hints.len() > known {
            // New holders: abandon the backed-off request and ask them next.
            entry.in_flight = None;
            entry.next_hint = known;
            entry.attempts = 0;
        }
    }

    /// Marks an item as obtained.
    pub fn satisfied(&mut self, item: &FetchItem) {
        self.entries.remove(item);
    }

    /// Sends requests for every idle item, grouped per target.
    pub fn dispatch(&mut self, fx: &mut Effects) {
        let mut per_target: BTreeMap<ReplicaId, Vec<FetchItem>> = BTreeMap::new();
        for (item, e) in &self.entries {
            if e.in_flight.is_none() && !e.hints.is_empty() {
                per_target.entry(e.hints[e.next_hint % e.hints.len()]).or_default().push(*item);
            }
        }
        for (target, items) in per_target {
            let id = self.next_id;
            self.next_id += 1;
            let mut backoff = 1;
            for item in &items {
                let e = self.entries.get_mut(item).expect("entry exists");
                e.in_flight = Some(id);
                let cycles = e.attempts as usize / e.hints.len();
                backoff = backoff.max(1u64 << cycles.min(3));
            }
            fx.observe(Observation::FetchRequested { target, items: items.len() });
            fx.send(target, Message::FetchRequest { id, items: items.clone() });
            fx.timer(Timer::FetchRetry { id }, self.base_timeout * backoff);
            self.requests.insert(id, items);
            self.requests_sent += 1;
        }
    }

    fn advance(&mut self, id: u64, items: &[FetchItem]) -> bool {
        let mut any = false;
        for item in items {
            if let Some(e) = self.entries.get_mut(item) {
                if e.in_flight == Some(id) {
                    e.in_flight = None;
                    e.next_hint += 1;
                    e.attempts += 1;
                    any = true;
                }
            }
        }
        any
    }

    /// Timer expiry for request `id`.
    pub fn on_timeout(&mut self, id: u64, fx: &mut Effects) {
        if let Some(items) = self.requests.remove(&id) {
            if self.advance(id, &items) {
                self.dispatch(fx);
            }
        }
    }

    /// A response arrived; items still pending were not served by that
    /// target. During the first pass over the hints they move on at once;
    /// later passes wait for the request's timer.
    pub fn on_response(&mut self, id: u64, fx: &mut Effects) {
        let Some(items) = self.requests.get(&id).cloned() else { return };
        let mut retry_now = Vec::new();
        for item in &items {
            if let Some(e) = self.entries.get(item) {
                if e.in_flight == Some(id) && (e.attempts as usize + 1) < e.hints.len() {
                    retry_now.push(*item);
                }
            }
        }
        if retry_now.len() == items.len() {
            self.requests.remove(&id);
        }
        if self.advance(id, &retry_now) {
            self.dispatch(fx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{generate_keys, SchemeKind};
    use crate::effects::Action;
    use crate::types::Variant;

    fn cfg() -> Arc<ProtocolConfig> {
        Arc::new(ProtocolConfig::new(1, Variant::Raptr))
    }

    #[test]
    fn split_is_contiguous_and_balanced() {
        let groups = split_groups((0..10).collect::<Vec<_>>(), 4);
        assert_eq!(groups, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7], vec![8, 9]]);
        assert_eq!(split_groups(vec![1], 3), vec![vec![1], vec![], vec![]]);
        assert_eq!(split_groups(Vec::<u8>::new(), 2), vec![Vec::<u8>::new(), vec![]]);
    }

    #[test]
    fn idle_mempool_creates_no_batch() {
        let mut s = BatchStore::new(ReplicaId(0), cfg());
        assert!(s.create_batch(0).is_none());
        s.submit(Transaction::with_size(1, 8));
        let b = s.create_batch(5).unwrap();
        assert_eq!((b.sn, b.txs.len()), (1, 1));
    }

    #[test]
    fn batch_capacity_is_respected() {
        let mut s = BatchStore::new(ReplicaId(0), cfg());
        for i in 0..1000 {
            s.submit(Transaction::with_size(i, 8));
        }
        assert_eq!(s.create_batch(0).unwrap().txs.len(), 450);
        assert_eq!(s.create_batch(150).unwrap().txs.len(), 450);
        assert_eq!(s.create_batch(300).unwrap().txs.len(), 100);
    }

    #[test]
    fn one_vote_per_batch_and_equivocation_flag() {
        let (keys, _) = generate_keys(SchemeKind::Test, 4, 4, 0);
        let mut s = BatchStore::new(ReplicaId(1), cfg());
        let mut fx = Effects::new();
        let b = Arc::new(Batch::new(ReplicaId(0), 1, 0, vec![Transaction::with_size(1, 8)]));
        assert_eq!(s.on_batch(ReplicaId(0), b.clone(), 1, &keys[1], &mut fx), BatchOutcome::Stored);
        assert_eq!(s.on_batch(ReplicaId(0), b, 2, &keys[1], &mut fx), BatchOutcome::Duplicate);
        let votes = fx.actions.iter().filter(|a| matches!(a, Action::Send { .. })).count();
        assert_eq!(votes, 1);
        let other = Arc::new(Batch::new(ReplicaId(0), 1, 0, vec![Transaction::with_size(2, 8)]));
        assert_eq!(s.on_batch(ReplicaId(0), other, 3, &keys[1], &mut fx), BatchOutcome::Equivocation);
        assert!(s.is_equivocator(ReplicaId(0)));
    }

    #[test]
    fn poa_formed_once_at_quorum() {
        let (keys, ring) = generate_keys(SchemeKind::Test, 4, 4, 0);
        let mut s = BatchStore::new(ReplicaId(0), cfg());
        s.submit(Transaction::with_size(1, 8));
        let b = s.create_batch(0).unwrap();
        let vote = |i: usize| keys[i].psign(0, &signing::poa_vote(&b.digest(), 1, ReplicaId(0))).unwrap();
        assert!(s.on_poa_vote(ReplicaId(0), 1, vote(0), &ring).is_none());
        assert!(s.on_poa_vote(ReplicaId(1), 1, vote(1), &ring).is_none());
        let poa = s.on_poa_vote(ReplicaId(2), 1, vote(2), &ring).expect("quorum");
        assert!(poa.verify(&cfg(), &ring));
        assert!(s.on_poa_vote(ReplicaId(3), 1, vote(3), &ring).is_none());
        // A vote signed by someone else is a strike.
        assert!(s.on_poa_vote(ReplicaId(3), 1, vote(2), &ring).is_none());
        assert_eq!(s.strikes[&ReplicaId(3)], 1);
    }
}
