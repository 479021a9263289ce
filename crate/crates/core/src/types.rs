//! Identifiers, ranks, batches and the protocol configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, Digest};

/// Round number. Round 0 belongs to the genesis block.
pub type Round = u64;
/// Number of leading sub-blocks covered by a vote or certificate.
pub type Prefix = u32;
/// Per-author batch sequence number.
pub type SeqNum = u64;
/// Simulated time in abstract ticks.
pub type SimTime = u64;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplicaId(pub u32);

impl ReplicaId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Debug for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.0)
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.0)
    }
}

/// `(round, prefix)`, ordered lexicographically.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Rank {
    pub round: Round,
    pub prefix: Prefix,
}

impl Rank {
    pub const GENESIS: Rank = Rank { round: 0, prefix: 0 };

    pub fn new(round: Round, prefix: Prefix) -> Self {
        Rank { round, prefix }
    }
}

impl fmt::Debug for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.round, self.prefix)
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Which protocol the replicas run.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Raptr,
    BabyRaptr,
    BaselineQs,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Raptr, Variant::BabyRaptr, Variant::BaselineQs];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Raptr => "raptr",
            Variant::BabyRaptr => "baby-raptr",
            Variant::BaselineQs => "baseline-qs",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unknown variant `{0}` (expected raptr, baby-raptr or baseline-qs)")]
pub struct UnknownVariant(pub String);

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "raptr" => Ok(Variant::Raptr),
            "baby-raptr" | "baby" => Ok(Variant::BabyRaptr),
            "baseline-qs" | "baseline" | "jolteon-qs" => Ok(Variant::BaselineQs),
            _ => Err(UnknownVariant(s.to_string())),
        }
    }
}

/// An opaque client transaction.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct Transaction {
    pub id: u64,
    pub payload: Vec<u8>,
}

impl Transaction {
    /// Builds a transaction whose payload is the id followed by zero padding.
    pub fn with_size(id: u64, size: usize) -> Self {
        let mut payload = id.to_le_bytes().to_vec();
        payload.resize(size.max(8), 0);
        Transaction { id, payload }
    }
}

/// A batch of transactions created by one replica.
#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct Batch {
    pub author: ReplicaId,
    pub sn: SeqNum,
    pub created_at: SimTime,
    pub txs: Vec<Transaction>,
    #[serde(skip)]
    digest: Digest,
}

impl Batch {
    pub fn new(author: ReplicaId, sn: SeqNum, created_at: SimTime, txs: Vec<Transaction>) -> Self {
        let digest = Self::compute_digest(author, sn, &txs);
        Batch { author, sn, created_at, txs, digest }
    }

    /// Digest over `(txs, sn, author)`; the creation time is not part of it.
    pub fn compute_digest(author: ReplicaId, sn: SeqNum, txs: &[Transaction]) -> Digest {
        codec::hash_value(codec::Domain::Batch, &(txs, sn, author))
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn key(&self) -> BatchKey {
        BatchKey { author: self.author, sn: self.sn }
    }

    pub fn info(&self) -> BatchInfo {
        BatchInfo { digest: self.digest, sn: self.sn, author: self.author, created_at: self.created_at }
    }

    /// Checks that the stored digest matches the content.
    pub fn is_well_formed(&self) -> bool {
        Self::compute_digest(self.author, self.sn, &self.txs) == self.digest
    }
}

/// Identity used for duplicate suppression at delivery time.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct BatchKey {
    pub author: ReplicaId,
    pub sn: SeqNum,
}

/// Metadata referencing a batch from a block.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize)]
pub struct BatchInfo {
    pub digest: Digest,
    pub sn: SeqNum,
    pub author: ReplicaId,
    pub created_at: SimTime,
}

impl BatchInfo {
    pub fn key(&self) -> BatchKey {
        BatchKey { author: self.author, sn: self.sn }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("n = {n} but f = {f}: n must equal 3f + 1")]
    ReplicaCount { n: usize, f: usize },
    #[error("f must be at least 1")]
    NoFaults,
    #[error("quorum_size = {got}, expected 2f + 1 = {expected}")]
    QuorumSize { got: usize, expected: usize },
    #[error("availability requirement S = {s} is below f + 1 = {min}")]
    AvailabilityTooLow { s: usize, min: usize },
    #[error("availability requirement S = {s} exceeds the quorum size {max}")]
    AvailabilityTooHigh { s: usize, max: usize },
    #[error("sub_blocks (M) must be at least 1")]
    NoSubBlocks,
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("delta must be positive")]
    Delta,
    #[error("batch_interval must be positive")]
    BatchInterval,
    #[error("batch_capacity must be positive")]
    BatchCapacity,
}

fn default_epsilon() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

/// Static protocol parameters shared by every replica.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub n: usize,
    pub f: usize,
    /// Defaults to `2f + 1`.
    #[serde(default)]
    pub quorum_size: Option<usize>,
    /// Availability requirement `S`; defaults to `f + 1`.
    #[serde(default, rename = "availability")]
    pub availability: Option<usize>,
    /// Number of sub-blocks `M`.
    pub sub_blocks: Prefix,
    pub delta: SimTime,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub min_batch_age: SimTime,
    pub batch_interval: SimTime,
    pub batch_capacity: usize,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_true")]
    pub two_chain_commit: bool,
}

impl ProtocolConfig {
    /// A configuration with `n = 3f + 1` and default timing.
    pub fn new(f: usize, variant: Variant) -> Self {
        ProtocolConfig {
            n: 3 * f + 1,
            f,
            quorum_size: None,
            availability: None,
            sub_blocks: 4,
            delta: 1000,
            epsilon: default_epsilon(),
            min_batch_age: 0,
            batch_interval: 500,
            batch_capacity: 450,
            variant,
            two_chain_commit: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.f == 0 {
            return Err(ConfigError::NoFaults);
        }
        if self.n != 3 * self.f + 1 {
            return Err(ConfigError::ReplicaCount { n: self.n, f: self.f });
        }
        let q = self.quorum();
        if q != 2 * self.f + 1 {
            return Err(ConfigError::QuorumSize { got: q, expected: 2 * self.f + 1 });
        }
        let s = self.s();
        if s < self.f + 1 {
            return Err(ConfigError::AvailabilityTooLow { s, min: self.f + 1 });
        }
        if s > q {
            return Err(ConfigError::AvailabilityTooHigh { s, max: q });
        }
        if self.sub_blocks == 0 {
            return Err(ConfigError::NoSubBlocks);
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(ConfigError::Epsilon(self.epsilon));
        }
        if self.delta == 0 {
            return Err(ConfigError::Delta);
        }
        if self.batch_interval == 0 {
            return Err(ConfigError::BatchInterval);
        }
        if self.batch_capacity == 0 {
            return Err(ConfigError::BatchCapacity);
        }
        Ok(())
    }

    pub fn quorum(&self) -> usize {
        self.quorum_size.unwrap_or(2 * self.f + 1)
    }

    /// Availability requirement `S`.
    pub fn s(&self) -> usize {
        self.availability.unwrap_or(self.f + 1)
    }

    /// Number of sub-blocks `M`.
    pub fn m(&self) -> Prefix {
        self.sub_blocks
    }

    /// Duration of the QC-vote timer, `εΔ`.
    pub fn qc_vote_delay(&self) -> SimTime {
        ((self.epsilon * self.delta as f64).round() as SimTime).max(1)
    }

    /// Duration of the round timer, `(4 + ε)Δ`.
    pub fn round_timeout(&self) -> SimTime {
        4 * self.delta + self.qc_vote_delay()
    }

    /// Round-robin leader schedule.
    pub fn leader(&self, round: Round) -> ReplicaId {
        ReplicaId((round.saturating_sub(1) % self.n as u64) as u32)
    }

    pub fn replicas(&self) -> impl Iterator<Item = ReplicaId> {
        (0..self.n as u32).map(ReplicaId)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_order_is_lexicographic() {
        assert!(Rank::new(5, 2) > Rank::new(4, 7));
        assert!(Rank::new(5, 3) > Rank::new(5, 2));
        assert!(Rank::GENESIS <= Rank::new(0, 0));
        assert!(Rank::GENESIS < Rank::new(1, 0));
    }

    #[test]
    fn validation_names_the_constraint() {
        let mut cfg = ProtocolConfig::new(1, Variant::Raptr);
        cfg.validate().unwrap();
        cfg.n = 5;
        assert_eq!(cfg.validate(), Err(ConfigError::ReplicaCount { n: 5, f: 1 }));
        let mut cfg = ProtocolConfig::new(1, Variant::Raptr);
        cfg.availability = Some(1);
        assert_eq!(cfg.validate(), Err(ConfigError::AvailabilityTooLow { s: 1, min: 2 }));
        cfg.availability = Some(4);
        assert_eq!(cfg.validate(), Err(ConfigError::AvailabilityTooHigh { s: 4, max: 3 }));
        cfg.availability = Some(3);
        cfg.validate().unwrap();
    }

    #[test]
    fn timers_follow_delta() {
        let cfg = ProtocolConfig::new(1, Variant::Raptr);
        assert_eq!(cfg.qc_vote_delay(), 100);
        assert_eq!(cfg.round_timeout(), 4100);
    }

    #[test]
    fn leaders_rotate() {
        let cfg = ProtocolConfig::new(1, Variant::Raptr);
        let leaders: Vec<u32> = (1..=6).map(|r| cfg.leader(r).0).collect();
        assert_eq!(leaders, vec![0, 1, 2, 3, 0, 1]);
    }

    #[test]
    fn batch_digest_ignores_creation_time() {
        let txs = vec![Transaction::with_size(1, 16)];
        let a = Batch::new(ReplicaId(0), 1, 10, txs.clone());
        let b = Batch::new(ReplicaId(0), 1, 99, txs.clone());
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), Batch::new(ReplicaId(0), 2, 10, txs.clone()).digest());
        assert_ne!(a.digest(), Batch::new(ReplicaId(1), 1, 10, txs).digest());
        assert!(a.is_well_formed());
    }

    #[test]
    fn variant_parses() {
        assert_eq!("baby_raptr".parse::<Variant>().unwrap(), Variant::BabyRaptr);
        assert!("hotstuff".parse::<Variant>().is_err());
    }
}
