//! Certificates (PoA, QC, CC, TC), entry reasons and the byte strings replicas sign.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::codec::Digest;
use crate::crypto::{verify_agg, AggregateSignature, Claim, PublicKeyRing, Tag};
use crate::types::{Prefix, ProtocolConfig, Rank, ReplicaId, Round, SeqNum};

/// Byte strings covered by partial signatures. Each starts with a distinct
/// kind byte so a signature for one message kind never verifies as another.
pub mod signing {
    use super::*;

    const QC_VOTE: u8 = 1;
    const CC_VOTE: u8 = 2;
    const TC_VOTE: u8 = 3;
    const POA_VOTE: u8 = 4;

    fn msg(kind: u8, digest: Option<&Digest>, a: u64, b: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + 32 + 16);
        out.push(kind);
        if let Some(d) = digest {
            out.extend_from_slice(&d.0);
        }
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
        out
    }

    pub fn qc_vote(hash: &Digest, round: Round, prefix: Prefix) -> Vec<u8> {
        msg(QC_VOTE, Some(hash), round, prefix as u64)
    }

    pub fn cc_vote(hash: &Digest, round: Round, prefix: Prefix) -> Vec<u8> {
        msg(CC_VOTE, Some(hash), round, prefix as u64)
    }

    /// TC-votes sign the round and the rank of the attached QC.
    pub fn tc_vote(round: Round, qc_rank: Rank) -> Vec<u8> {
        let mut out = msg(TC_VOTE, None, round, qc_rank.round);
        out.extend_from_slice(&(qc_rank.prefix as u64).to_le_bytes());
        out
    }

    pub fn poa_vote(digest: &Digest, sn: SeqNum, author: ReplicaId) -> Vec<u8> {
        msg(POA_VOTE, Some(digest), sn, author.0 as u64)
    }
}

/// Tag used for messages that carry no prefix.
pub const UNTAGGED: Tag = 0;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CertError {
    #[error("certificate has {got} votes, needs at least {need}")]
    TooFewVotes { got: usize, need: usize },
    #[error("replica {0} appears more than once")]
    DuplicateVoter(ReplicaId),
    #[error("certificate has no votes")]
    Empty,
}

fn check_unique<T>(votes: &[(ReplicaId, T)]) -> Result<(), CertError> {
    for w in votes.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(CertError::DuplicateVoter(w[0].0));
        }
    }
    Ok(())
}

/// The `S`'th largest prefix among the votes, duplicates counted.
pub fn certified_prefix(prefixes: impl IntoIterator<Item = Prefix>, s: usize) -> Result<Prefix, CertError> {
    let mut all: Vec<Prefix> = prefixes.into_iter().collect();
    if s == 0 || all.len() < s {
        return Err(CertError::TooFewVotes { got: all.len(), need: s.max(1) });
    }
    let (_, nth, _) = all.select_nth_unstable_by(s - 1, |a, b| b.cmp(a));
    Ok(*nth)
}

/// Digest standing in for the genesis block.
pub fn genesis_digest() -> Digest {
    static GENESIS: std::sync::OnceLock<Digest> = std::sync::OnceLock::new();
    *GENESIS.get_or_init(|| crate::codec::hash_bytes(crate::codec::Domain::Genesis, b"genesis"))
}

#[derive(Clone, PartialEq, Eq, Serialize)]
pub struct QuorumCertificate {
    round: Round,
    hash: Digest,
    vote_prefixes: Vec<(ReplicaId, Prefix)>,
    signature: Option<AggregateSignature>,
    #[serde(skip)]
    prefix: Prefix,
}

impl QuorumCertificate {
    pub fn genesis() -> Self {
        QuorumCertificate { round: 0, hash: genesis_digest(), vote_prefixes: Vec::new(), signature: None, prefix: 0 }
    }

    /// Builds a QC and derives its certified prefix with availability
    /// requirement `s`. Votes are sorted by replica id.
    pub fn new(
        round: Round,
        hash: Digest,
        mut vote_prefixes: Vec<(ReplicaId, Prefix)>,
        signature: AggregateSignature,
        s: usize,
    ) -> Result<Self, CertError> {
        vote_prefixes.sort_by_key(|v| v.0);
        check_unique(&vote_prefixes)?;
        let prefix = certified_prefix(vote_prefixes.iter().map(|v| v.1), s)?;
        Ok(QuorumCertificate { round, hash, vote_prefixes, signature: Some(signature), prefix })
    }

    pub fn round(&self) -> Round {
        self.round
    }

    pub fn hash(&self) -> Digest {
        self.hash
    }

    /// Certified prefix.
    pub fn prefix(&self) -> Prefix {
        self.prefix
    }

    pub fn rank(&self) -> Rank {
        Rank::new(self.round, self.prefix)
    }

    pub fn vote_prefixes(&self) -> &[(ReplicaId, Prefix)] {
        &self.vote_prefixes
    }

    pub fn signature(&self) -> Option<&AggregateSignature> {
        self.signature.as_ref()
    }

    pub fn is_genesis(&self) -> bool {
        self.round == 0
    }

    /// Voters whose vote covers at least `prefix` sub-blocks.
    pub fn holders_of(&self, prefix: Prefix) -> impl Iterator<Item = ReplicaId> + '_ {
        self.vote_prefixes.iter().filter(move |v| v.1 >= prefix).map(|v| v.0)
    }

    pub fn verify(&self, cfg: &ProtocolConfig, ring: &PublicKeyRing) -> bool {
        if self.round == 0 {
            return *self == Self::genesis();
        }
        let Some(sig) = &self.signature else { return false };
        if self.vote_prefixes.len() < cfg.quorum() || self.vote_prefixes.iter().any(|v| v.1 > cfg.m()) {
            return false;
        }
        let msgs: Vec<Vec<u8>> =
            self.vote_prefixes.iter().map(|&(_, p)| signing::qc_vote(&self.hash, self.round, p)).collect();
        let mut claims = Vec::with_capacity(msgs.len());
        for (&(q, p), m) in self.vote_prefixes.iter().zip(&msgs) {
            let Some(public) = ring.share(q, p) else { return false };
            claims.push(Claim { public, tag: p, message: m });
        }
        verify_agg(&claims, sig)
    }
}

impl fmt::Debug for QuorumCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "QC(r{}, p{}, {:?}, votes {:?})", self.round, self.prefix, self.hash, self.vote_prefixes)
    }
}

#[derive(Clone, PartialEq, Eq, Serialize)]
pub struct CommitCertificate {
    round: Round,
    hash: Digest,
    vote_prefixes: Vec<(ReplicaId, Prefix)>,
    signature: AggregateSignature,
    #[serde(skip)]
    commit_prefix: Prefix,
    #[serde(skip)]
    extend_prefix: Prefix,
}

impl CommitCertificate {
    pub fn new(
        round: Round,
        hash: Digest,
        mut vote_prefixes: Vec<(ReplicaId, Prefix)>,
        signature: AggregateSignature,
    ) -> Result<Self, CertError> {
        vote_prefixes.sort_by_key(|v| v.0);
        check_unique(&vote_prefixes)?;
        let commit_prefix = vote_prefixes.iter().map(|v| v.1).min().ok_or(CertError::Empty)?;
        let extend_prefix = vote_prefixes.iter().map(|v| v.1).max().ok_or(CertError::Empty)?;
        Ok(CommitCertificate { round, hash, vote_prefixes, signature, commit_prefix, extend_prefix })
    }

    pub fn round(&self) -> Round {
        self.round
    }

    pub fn hash(&self) -> Digest {
        self.hash
    }

    pub fn vote_prefixes(&self) -> &[(ReplicaId, Prefix)] {
        &self.vote_prefixes
    }

    pub fn commit_prefix(&self) -> Prefix {
        self.commit_prefix
    }

    pub fn extend_prefix(&self) -> Prefix {
        self.extend_prefix
    }

    pub fn verify(&self, cfg: &ProtocolConfig, ring: &PublicKeyRing) -> bool {
        if self.vote_prefixes.len() != cfg.quorum() || self.vote_prefixes.iter().any(|v| v.1 > cfg.m()) {
            return false;
        }
        let msgs: Vec<Vec<u8>> =
            self.vote_prefixes.iter().map(|&(_, p)| signing::cc_vote(&self.hash, self.round, p)).collect();
        let mut claims = Vec::with_capacity(msgs.len());
        for (&(q, p), m) in self.vote_prefixes.iter().zip(&msgs) {
            let Some(public) = ring.share(q, p) else { return false };
            claims.push(Claim { public, tag: p, message: m });
        }
        verify_agg(&claims, &self.signature)
    }
}

impl fmt::Debug for CommitCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CC(r{}, commit {}, extend {}, {:?})", self.round, self.commit_prefix, self.extend_prefix, self.hash)
    }
}

#[derive(Clone, PartialEq, Eq, Serialize)]
pub struct TimeoutCertificate {
    round: Round,
    vote_data: Vec<(ReplicaId, Rank)>,
    signature: AggregateSignature,
    #[serde(skip)]
    extend_rank: Rank,
}

impl TimeoutCertificate {
    pub fn new(
        round: Round,
        mut vote_data: Vec<(ReplicaId, Rank)>,
        signature: AggregateSignature,
    ) -> Result<Self, CertError> {
        vote_data.sort_by_key(|v| v.0);
        check_unique(&vote_data)?;
        let extend_rank = vote_data.iter().map(|v| v.1).max().ok_or(CertError::Empty)?;
        Ok(TimeoutCertificate { round, vote_data, signature, extend_rank })
    }

    pub fn round(&self) -> Round {
        self.round
    }

    pub fn vote_data(&self) -> &[(ReplicaId, Rank)] {
        &self.vote_data
    }

    pub fn extend_rank(&self) -> Rank {
        self.extend_rank
    }

    pub fn verify(&self, cfg: &ProtocolConfig, ring: &PublicKeyRing) -> bool {
        if self.vote_data.len() < cfg.quorum() {
            return false;
        }
        let msgs: Vec<Vec<u8>> = self.vote_data.iter().map(|&(_, rank)| signing::tc_vote(self.round, rank)).collect();
        let mut claims = Vec::with_capacity(msgs.len());
        for (&(q, _), m) in self.vote_data.iter().zip(&msgs) {
            let Some(public) = ring.share(q, UNTAGGED) else { return false };
            claims.push(Claim { public, tag: UNTAGGED, message: m });
        }
        verify_agg(&claims, &self.signature)
    }
}

impl fmt::Debug for TimeoutCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TC(r{}, extend {})", self.round, self.extend_rank)
    }
}

#[derive(Clone, PartialEq, Eq, Serialize)]
pub struct ProofOfAvailability {
    digest: Digest,
    sn: SeqNum,
    author: ReplicaId,
    votes: Vec<ReplicaId>,
    signature: AggregateSignature,
}

impl ProofOfAvailability {
    pub fn new(
        digest: Digest,
        sn: SeqNum,
        author: ReplicaId,
        mut votes: Vec<ReplicaId>,
        signature: AggregateSignature,
    ) -> Result<Self, CertError> {
        votes.sort();
        for w in votes.windows(2) {
            if w[0] == w[1] {
                return Err(CertError::DuplicateVoter(w[0]));
            }
        }
        if votes.is_empty() {
            return Err(CertError::Empty);
        }
        Ok(ProofOfAvailability { digest, sn, author, votes, signature })
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn sn(&self) -> SeqNum {
        self.sn
    }

    pub fn author(&self) -> ReplicaId {
        self.author
    }

    pub fn key(&self) -> crate::types::BatchKey {
        crate::types::BatchKey { author: self.author, sn: self.sn }
    }

    pub fn votes(&self) -> &[ReplicaId] {
        &self.votes
    }

    pub fn verify(&self, cfg: &ProtocolConfig, ring: &PublicKeyRing) -> bool {
        if self.votes.len() < cfg.quorum() {
            return false;
        }
        let msg = signing::poa_vote(&self.digest, self.sn, self.author);
        let mut claims = Vec::with_capacity(self.votes.len());
        for &q in &self.votes {
            let Some(public) = ring.share(q, UNTAGGED) else { return false };
            claims.push(Claim { public, tag: UNTAGGED, message: &msg });
        }
        verify_agg(&claims, &self.signature)
    }
}

impl fmt::Debug for ProofOfAvailability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PoA({}#{}, {:?})", self.author, self.sn, self.digest)
    }
}

/// Justification for entering a round.
#[derive(Clone, PartialEq, Eq, Serialize)]
pub enum EntryReason {
    FullQc(Arc<QuorumCertificate>),
    Cc(Arc<CommitCertificate>, Arc<QuorumCertificate>),
    Tc(Arc<TimeoutCertificate>, Arc<QuorumCertificate>),
}

impl EntryReason {
    pub fn genesis() -> Self {
        EntryReason::FullQc(Arc::new(QuorumCertificate::genesis()))
    }

    /// The round this reason allows entering.
    pub fn round(&self) -> Round {
        match self {
            EntryReason::FullQc(qc) | EntryReason::Cc(_, qc) => qc.round() + 1,
            EntryReason::Tc(tc, _) => tc.round() + 1,
        }
    }

    /// The QC a block proposed under this reason extends.
    pub fn qc(&self) -> &Arc<QuorumCertificate> {
        match self {
            EntryReason::FullQc(qc) | EntryReason::Cc(_, qc) | EntryReason::Tc(_, qc) => qc,
        }
    }

    pub fn is_tc(&self) -> bool {
        matches!(self, EntryReason::Tc(..))
    }

    /// Structural rules relating the reason's certificate to its QC.
    pub fn is_consistent(&self, m: Prefix) -> bool {
        match self {
            // A genesis reason is only valid for round 1.
            EntryReason::FullQc(qc) => qc.prefix() == m || qc.is_genesis(),
            EntryReason::Cc(cc, qc) => cc.round() == qc.round() && qc.prefix() >= cc.extend_prefix(),
            EntryReason::Tc(tc, qc) => qc.rank() >= tc.extend_rank() && qc.round() <= tc.round(),
        }
    }

    /// Structural check plus signature checks of every certificate.
    pub fn verify(&self, cfg: &ProtocolConfig, ring: &PublicKeyRing) -> bool {
        if !self.is_consistent(cfg.m()) || !self.qc().verify(cfg, ring) {
            return false;
        }
        match self {
            EntryReason::FullQc(_) => true,
            EntryReason::Cc(cc, _) => cc.verify(cfg, ring),
            EntryReason::Tc(tc, _) => tc.verify(cfg, ring),
        }
    }
}

impl fmt::Debug for EntryReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntryReason::FullQc(qc) => write!(f, "FullQc({:?})", qc.rank()),
            EntryReason::Cc(cc, qc) => write!(f, "Cc({:?}, {:?})", cc, qc.rank()),
            EntryReason::Tc(tc, qc) => write!(f, "Tc({:?}, {:?})", tc, qc.rank()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{combine, generate_keys, SchemeKind};

    #[test]
    fn certified_prefix_of_mixed_votes() {
        assert_eq!(certified_prefix([3, 4, 3], 2).unwrap(), 3);
        assert_eq!(certified_prefix([4, 3, 4], 2).unwrap(), 4);
        assert_eq!(certified_prefix([4, 4, 4], 3).unwrap(), 4);
        assert_eq!(certified_prefix([1], 2), Err(CertError::TooFewVotes { got: 1, need: 2 }));
    }

    #[test]
    fn genesis_rank_is_minimal() {
        let g = QuorumCertificate::genesis();
        assert_eq!(g.rank(), Rank::GENESIS);
        assert_eq!(EntryReason::genesis().round(), 1);
    }

    fn qc_with(prefixes: &[Prefix], s: usize) -> (QuorumCertificate, ProtocolConfig, PublicKeyRing) {
        let mut cfg = ProtocolConfig::new(1, crate::types::Variant::Raptr);
        cfg.availability = Some(s);
        let (sk, ring) = generate_keys(SchemeKind::Test, 4, cfg.m(), 1);
        let h = Digest([9; 32]);
        let parts: Vec<_> =
            prefixes.iter().enumerate().map(|(i, &p)| sk[i].psign(p, &signing::qc_vote(&h, 5, p)).unwrap()).collect();
        let votes = prefixes.iter().enumerate().map(|(i, &p)| (ReplicaId(i as u32), p)).collect();
        let qc = QuorumCertificate::new(5, h, votes, combine(&parts).unwrap(), s).unwrap();
        (qc, cfg, ring)
    }

    #[test]
    fn qc_verifies_and_binds_prefixes() {
        let (qc, cfg, ring) = qc_with(&[3, 4, 3], 2);
        assert_eq!(qc.prefix(), 3);
        assert!(qc.verify(&cfg, &ring));
        let mut forged = qc.clone();
        forged.vote_prefixes[0].1 = 4;
        assert!(!forged.verify(&cfg, &ring));
    }

    #[test]
    fn duplicate_voters_rejected() {
        let (qc, _, _) = qc_with(&[3, 4, 3], 2);
        let sig = qc.signature().unwrap().clone();
        let err = QuorumCertificate::new(5, qc.hash(), vec![(ReplicaId(1), 2), (ReplicaId(1), 3)], sig, 2);
        assert_eq!(err.unwrap_err(), CertError::DuplicateVoter(ReplicaId(1)));
    }

    #[test]
    fn tc_extend_rank_is_max() {
        let (sk, _) = generate_keys(SchemeKind::Test, 4, 8, 1);
        let ranks = [Rank::new(5, 2), Rank::new(5, 4), Rank::new(4, 7)];
        let parts: Vec<_> =
            ranks.iter().enumerate().map(|(i, r)| sk[i].psign(0, &signing::tc_vote(6, *r)).unwrap()).collect();
        let data = ranks.iter().enumerate().map(|(i, r)| (ReplicaId(i as u32), *r)).collect();
        let tc = TimeoutCertificate::new(6, data, combine(&parts).unwrap()).unwrap();
        assert_eq!(tc.extend_rank(), Rank::new(5, 4));
    }
}
