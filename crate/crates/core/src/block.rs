//! Blocks, block prefixes and the chain algebra over them.

use std::fmt;
use std::sync::Arc;

use rustc_hash::{FxHashMap as HashMap, FxHashSet as HashSet};
use serde::Serialize;
use thiserror::Error;

use crate::cert::{genesis_digest, EntryReason, ProofOfAvailability, QuorumCertificate};
use crate::codec::{self, Digest, Domain};
use crate::crypto::PublicKeyRing;
use crate::types::{Batch, BatchInfo, BatchKey, Prefix, ProtocolConfig, Round};

#[derive(Clone, PartialEq, Eq, Default, Serialize)]
pub struct BlockPayload {
    pub poas: Vec<Arc<ProofOfAvailability>>,
    /// Exactly `M` groups; empty groups are allowed.
    pub sub_blocks: Vec<Vec<BatchInfo>>,
}

impl BlockPayload {
    pub fn empty(m: Prefix) -> Self {
        BlockPayload { poas: Vec::new(), sub_blocks: vec![Vec::new(); m as usize] }
    }

    /// Optimistic batches of sub-blocks `1..=prefix`.
    pub fn optimistic_up_to(&self, prefix: Prefix) -> impl Iterator<Item = &BatchInfo> {
        self.sub_blocks.iter().take(prefix as usize).flatten()
    }

    pub fn optimistic(&self) -> impl Iterator<Item = &BatchInfo> {
        self.sub_blocks.iter().flatten()
    }

    pub fn batch_count(&self) -> usize {
        self.poas.len() + self.sub_blocks.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.batch_count() == 0
    }

    /// No batch referenced twice, whether as PoA or optimistically.
    pub fn has_unique_batches(&self) -> bool {
        let mut seen = HashSet::with_capacity_and_hasher(self.batch_count(), Default::default());
        self.poas.iter().all(|p| seen.insert(p.key())) && self.optimistic().all(|b| seen.insert(b.key()))
    }
}

#[derive(Clone, PartialEq, Eq, Serialize)]
pub struct Block {
    round: Round,
    entry_reason: EntryReason,
    payload: BlockPayload,
    #[serde(skip)]
    digest: Digest,
}

impl Block {
    pub fn new(round: Round, entry_reason: EntryReason, payload: BlockPayload) -> Self {
        let digest = codec::hash_value(Domain::Block, &(round, &entry_reason, &payload));
        Block { round, entry_reason, payload, digest }
    }

    pub fn round(&self) -> Round {
        self.round
    }

    pub fn entry_reason(&self) -> &EntryReason {
        &self.entry_reason
    }

    pub fn qc_parent(&self) -> &Arc<QuorumCertificate> {
        self.entry_reason.qc()
    }

    pub fn payload(&self) -> &BlockPayload {
        &self.payload
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    /// Structural validity plus verification of every embedded certificate.
    pub fn verify(&self, cfg: &ProtocolConfig, ring: &PublicKeyRing) -> bool {
        self.is_well_formed(cfg)
            && self.entry_reason.verify(cfg, ring)
            && self.payload.poas.iter().all(|p| p.verify(cfg, ring))
    }

    /// Checks that do not involve signatures.
    pub fn is_well_formed(&self, cfg: &ProtocolConfig) -> bool {
        self.entry_reason.round() == self.round
            && self.qc_parent().round() < self.round
            && self.payload.sub_blocks.len() == cfg.m() as usize
            && self.payload.has_unique_batches()
    }
}

impl fmt::Debug for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Block(r{}, {:?}, parent {:?}, {} poas, {:?} opt)",
            self.round,
            self.digest,
            self.qc_parent().rank(),
            self.payload.poas.len(),
            self.payload.sub_blocks.iter().map(Vec::len).collect::<Vec<_>>()
        )
    }
}

/// A block together with how many of its sub-blocks are included.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize)]
pub struct BlockPrefix {
    pub block: Digest,
    pub round: Round,
    pub prefix: Prefix,
}

impl BlockPrefix {
    pub fn genesis() -> Self {
        BlockPrefix { block: genesis_digest(), round: 0, prefix: 0 }
    }

    pub fn of_qc(qc: &QuorumCertificate) -> Self {
        BlockPrefix { block: qc.hash(), round: qc.round(), prefix: qc.prefix() }
    }

    pub fn is_genesis(&self) -> bool {
        self.round == 0
    }
}

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
pub enum DataUnavailable {
    #[error("block {0:?} is not available locally")]
    Block(Digest),
    #[error("batch {0:?} is not available locally")]
    Batch(Digest),
}

/// Blocks known to a replica, keyed by digest.
#[derive(Default, Clone)]
pub struct BlockStore {
    blocks: HashMap<Digest, Arc<Block>>,
}

impl BlockStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, block: Arc<Block>) -> bool {
        use std::collections::hash_map::Entry;
        match self.blocks.entry(block.digest()) {
            Entry::Occupied(_) => false,
            Entry::Vacant(v) => {
                v.insert(block);
                true
            }
        }
    }

    pub fn get(&self, digest: &Digest) -> Option<&Arc<Block>> {
        self.blocks.get(digest)
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        *digest == genesis_digest() || self.blocks.contains_key(digest)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = &Arc<Block>> {
        self.blocks.values()
    }

    /// Round of a block, 0 for genesis.
    pub fn round_of(&self, digest: &Digest) -> Result<Round, DataUnavailable> {
        if *digest == genesis_digest() {
            return Ok(0);
        }
        self.get(digest).map(|b| b.round()).ok_or(DataUnavailable::Block(*digest))
    }
}

/// Source of batch contents by digest.
pub trait BatchLookup {
    fn batch(&self, digest: &Digest) -> Option<&Arc<Batch>>;
}

impl BatchLookup for HashMap<Digest, Arc<Batch>> {
    fn batch(&self, digest: &Digest) -> Option<&Arc<Batch>> {
        self.get(digest)
    }
}

/// `chain(qc)`: block prefixes from genesis up to the one `qc` certifies.
pub fn chain_of(qc: &QuorumCertificate, store: &BlockStore) -> Result<Vec<BlockPrefix>, DataUnavailable> {
    let mut out = Vec::new();
    let mut cur = BlockPrefix::of_qc(qc);
    while !cur.is_genesis() {
        let block = store.get(&cur.block).ok_or(DataUnavailable::Block(cur.block))?;
        out.push(cur);
        cur = BlockPrefix::of_qc(block.qc_parent());
    }
    out.push(BlockPrefix::genesis());
    out.reverse();
    Ok(out)
}

/// `qc1 ⪯ qc2`: some element of `chain(qc2)` is `qc1`'s block with a prefix
/// at least `qc1.prefix`.
pub fn is_prefix_of(
    qc1: &QuorumCertificate,
    qc2: &QuorumCertificate,
    store: &BlockStore,
) -> Result<bool, DataUnavailable> {
    if qc1.is_genesis() {
        return Ok(true);
    }
    let mut cur = BlockPrefix::of_qc(qc2);
    // Rounds strictly decrease along parent links, so stop once below qc1's round.
    while cur.round >= qc1.round() && !cur.is_genesis() {
        if cur.block == qc1.hash() {
            return Ok(qc1.prefix() <= cur.prefix);
        }
        let block = store.get(&cur.block).ok_or(DataUnavailable::Block(cur.block))?;
        cur = BlockPrefix::of_qc(block.qc_parent());
    }
    Ok(false)
}

/// Batch references of one chain element: PoA batches ordered by
/// `(author, sn)`, then optimistic batches of sub-blocks `1..=prefix`.
pub fn element_batches(block: &Block, prefix: Prefix) -> Vec<(BatchKey, Digest)> {
    let mut poas: Vec<(BatchKey, Digest)> = block.payload().poas.iter().map(|p| (p.key(), p.digest())).collect();
    poas.sort();
    poas.extend(block.payload().optimistic_up_to(prefix).map(|b| (b.key(), b.digest)));
    poas
}

/// `messages(chain)`: the batches a chain orders, in delivery order,
/// including repeats (the delivery layer skips batches already delivered).
pub fn messages_of(
    chain: &[BlockPrefix],
    store: &BlockStore,
    batches: &impl BatchLookup,
) -> Result<Vec<Arc<Batch>>, DataUnavailable> {
    let mut out = Vec::new();
    for element in chain.iter().filter(|e| !e.is_genesis()) {
        let block = store.get(&element.block).ok_or(DataUnavailable::Block(element.block))?;
        for (_, digest) in element_batches(block, element.prefix) {
            out.push(batches.batch(&digest).cloned().ok_or(DataUnavailable::Batch(digest))?);
        }
    }
    Ok(out)
}
