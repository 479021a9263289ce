//! Behavioral differences between Raptr, Baby Raptr and the baseline.

use crate::cert::QuorumCertificate;
use crate::types::{Prefix, ProtocolConfig, Rank, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantPolicy {
    variant: Variant,
    m: Prefix,
}

impl VariantPolicy {
    pub fn for_config(cfg: &ProtocolConfig) -> Self {
        VariantPolicy { variant: cfg.variant, m: cfg.m() }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Prefix to vote for given the locally available prefix, or `None` to
    /// withhold the vote.
    pub fn vote_prefix(&self, available: Prefix) -> Option<Prefix> {
        match self.variant {
            Variant::Raptr => Some(available),
            Variant::BabyRaptr => (available == self.m).then_some(self.m),
            // Blocks carry no optimistic batches, so everything is available.
            Variant::BaselineQs => Some(self.m),
        }
    }

    /// Whether the QC-vote timer may trigger a partial-prefix vote.
    pub fn timer_votes(&self) -> bool {
        self.variant == Variant::Raptr
    }

    /// Whether a leader includes batches that have no PoA yet.
    pub fn optimistic_payload(&self, entered_by_tc: bool) -> bool {
        match self.variant {
            Variant::Raptr => true,
            Variant::BabyRaptr => !entered_by_tc,
            Variant::BaselineQs => false,
        }
    }

    /// Key under which QCs are compared for "strictly higher" decisions.
    /// The baseline compares rounds only.
    pub fn order_key(&self, qc: &QuorumCertificate) -> Rank {
        match self.variant {
            Variant::BaselineQs => Rank::new(qc.round(), 0),
            _ => qc.rank(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(v: Variant) -> VariantPolicy {
        VariantPolicy::for_config(&ProtocolConfig::new(1, v))
    }

    #[test]
    fn raptr_votes_any_prefix() {
        let p = policy(Variant::Raptr);
        assert_eq!(p.vote_prefix(2), Some(2));
        assert!(p.timer_votes());
        assert!(p.optimistic_payload(true));
    }

    #[test]
    fn baby_votes_all_or_nothing() {
        let p = policy(Variant::BabyRaptr);
        assert_eq!(p.vote_prefix(3), None);
        assert_eq!(p.vote_prefix(4), Some(4));
        assert!(!p.timer_votes());
        assert!(p.optimistic_payload(false));
        assert!(!p.optimistic_payload(true));
    }

    #[test]
    fn baseline_proposes_proofs_only() {
        let p = policy(Variant::BaselineQs);
        assert!(!p.optimistic_payload(false));
        assert_eq!(p.vote_prefix(0), Some(4));
    }
}
