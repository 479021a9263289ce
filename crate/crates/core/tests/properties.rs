use std::sync::Arc;

use proptest::prelude::*;
use raptr_core::cert::signing;
use raptr_core::crypto::{combine, generate_keys, AggregateSignature, SchemeKind};
use raptr_core::quorum_store::split_groups;
use raptr_core::scenario::ScenarioConfig;
use raptr_core::{
    certified_prefix, Batch, CommitCertificate, Digest, Prefix, ProtocolConfig, QuorumCertificate, Rank, ReplicaId,
    TimeoutCertificate, Transaction, Variant,
};

fn dummy_sig() -> AggregateSignature {
    AggregateSignature::from_parts(SchemeKind::Test, vec![0; 16])
}

/// Sort descending and index: the obvious reading of "S'th largest".
fn sth_largest(prefixes: &[Prefix], s: usize) -> Prefix {
    let mut v = prefixes.to_vec();
    v.sort_unstable_by(|a, b| b.cmp(a));
    v[s - 1]
}

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![Just(Variant::Raptr), Just(Variant::BabyRaptr), Just(Variant::BaselineQs)]
}

proptest! {
    #[test]
    fn certified_prefix_is_sth_largest(prefixes in prop::collection::vec(0u32..=8, 1..16), pick in any::<prop::sample::Index>()) {
        let s = pick.index(prefixes.len()) + 1;
        prop_assert_eq!(certified_prefix(prefixes.clone(), s).unwrap(), sth_largest(&prefixes, s));
    }

    #[test]
    fn certified_prefix_needs_s_votes(prefixes in prop::collection::vec(0u32..=4, 0..6), extra in 1usize..4) {
        prop_assert!(certified_prefix(prefixes.clone(), prefixes.len() + extra).is_err());
    }

    #[test]
    fn rank_order_matches_tuple_order(a in (0u64..50, 0u32..5), b in (0u64..50, 0u32..5)) {
        let (ra, rb) = (Rank::new(a.0, a.1), Rank::new(b.0, b.1));
        prop_assert_eq!(ra.cmp(&rb), a.cmp(&b));
    }

    #[test]
    fn commit_certificate_commits_min_extends_max(prefixes in prop::collection::vec(0u32..=4, 1..8)) {
        let votes: Vec<(ReplicaId, Prefix)> = prefixes.iter().enumerate().map(|(i, p)| (ReplicaId(i as u32), *p)).collect();
        let cc = CommitCertificate::new(3, Digest::ZERO, votes, dummy_sig()).unwrap();
        prop_assert_eq!(cc.commit_prefix(), *prefixes.iter().min().unwrap());
        prop_assert_eq!(cc.extend_prefix(), *prefixes.iter().max().unwrap());
        prop_assert!(cc.commit_prefix() <= cc.extend_prefix());
    }

    #[test]
    fn timeout_certificate_extends_max_rank(ranks in prop::collection::vec((0u64..20, 0u32..=4), 1..8)) {
        let data: Vec<(ReplicaId, Rank)> =
            ranks.iter().enumerate().map(|(i, r)| (ReplicaId(i as u32), Rank::new(r.0, r.1))).collect();
        let tc = TimeoutCertificate::new(21, data, dummy_sig()).unwrap();
        let max = ranks.iter().max().unwrap();
        prop_assert_eq!(tc.extend_rank(), Rank::new(max.0, max.1));
    }

    #[test]
    fn repeated_voter_is_rejected(prefixes in prop::collection::vec(0u32..=4, 2..6), dup in 1usize..5) {
        let mut votes: Vec<(ReplicaId, Prefix)> =
            prefixes.iter().enumerate().map(|(i, p)| (ReplicaId(i as u32), *p)).collect();
        let d = dup % votes.len();
        votes.push((ReplicaId(d as u32), 0));
        prop_assert!(QuorumCertificate::new(1, Digest::ZERO, votes, dummy_sig(), 1).is_err());
    }

    #[test]
    fn qc_verification_binds_every_prefix(
        f in 1usize..3,
        seed in any::<u64>(),
        prefixes in prop::collection::vec(0u32..=4, 7),
        victim in any::<prop::sample::Index>(),
        bump in 1u32..=4,
    ) {
        let cfg = ProtocolConfig::new(f, Variant::Raptr);
        let (keys, ring) = generate_keys(SchemeKind::Test, cfg.n, cfg.m(), seed);
        let hash = Digest([7; 32]);
        let q = cfg.quorum();
        let votes: Vec<(ReplicaId, Prefix)> = (0..q).map(|i| (ReplicaId(i as u32), prefixes[i])).collect();
        let partials: Vec<_> = votes
            .iter()
            .map(|&(r, p)| keys[r.index()].psign(p, &signing::qc_vote(&hash, 9, p)).unwrap())
            .collect();
        let sig = combine(&partials).unwrap();
        let qc = QuorumCertificate::new(9, hash, votes.clone(), sig.clone(), cfg.s()).unwrap();
        prop_assert!(qc.verify(&cfg, &ring));

        let mut forged = votes;
        let i = victim.index(forged.len());
        forged[i].1 = (forged[i].1 + bump) % (cfg.m() + 1);
        let bad = QuorumCertificate::new(9, hash, forged, sig, cfg.s()).unwrap();
        prop_assert!(!bad.verify(&cfg, &ring));
    }

    #[test]
    fn batch_digest_detects_mutation(
        txs in prop::collection::vec((any::<u64>(), 8usize..40), 1..6),
        which in any::<prop::sample::Index>(),
        byte in any::<prop::sample::Index>(),
    ) {
        let txs: Vec<Transaction> = txs.into_iter().map(|(id, size)| Transaction::with_size(id, size)).collect();
        let batch = Batch::new(ReplicaId(2), 5, 100, txs);
        prop_assert!(batch.is_well_formed());
        let mut bad = batch.clone();
        let tx = &mut bad.txs[which.index(batch.txs.len())];
        let at = byte.index(tx.payload.len());
        tx.payload[at] ^= 0x01;
        prop_assert!(!bad.is_well_formed());
        let mut moved = batch.clone();
        moved.sn += 1;
        prop_assert!(!moved.is_well_formed());
    }

    #[test]
    fn split_groups_keeps_order_and_balance(len in 0usize..40, m in 1u32..8) {
        let items: Vec<usize> = (0..len).collect();
        let groups = split_groups(items.clone(), m);
        prop_assert_eq!(groups.len(), m as usize);
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(groups.concat(), items);
    }

    #[test]
    fn scenario_toml_roundtrip(
        f in 1usize..4,
        v in variant(),
        seed in 0..=i64::MAX as u64,
        interval in 1u64..5000,
        s_extra in 0usize..3,
    ) {
        let mut sc = ScenarioConfig::fault_free(f, v).with_seed(seed);
        sc.load.interval = interval;
        sc.protocol.availability = Some(f + 1 + s_extra.min(f));
        prop_assert!(sc.validate().is_ok());
        let back = ScenarioConfig::from_toml(&sc.to_toml()).unwrap();
        prop_assert_eq!(back, sc);
    }

    #[test]
    fn availability_outside_range_is_rejected(f in 1usize..5, low in any::<bool>()) {
        let mut cfg = ProtocolConfig::new(f, Variant::Raptr);
        cfg.availability = Some(if low { f } else { 2 * f + 2 });
        prop_assert!(cfg.validate().is_err());
    }
}

#[test]
fn seeds_beyond_toml_range_are_rejected() {
    let sc = ScenarioConfig::fault_free(1, Variant::Raptr).with_seed(1 << 63);
    assert!(sc.validate().is_err());
    assert!(ScenarioConfig::fault_free(1, Variant::Raptr).with_seed(i64::MAX as u64).validate().is_ok());
}

#[test]
fn genuine_qc_survives_encoding() {
    let cfg = ProtocolConfig::new(1, Variant::Raptr);
    let (keys, ring) = generate_keys(SchemeKind::Ed25519, cfg.n, cfg.m(), 3);
    let hash = Digest([1; 32]);
    let votes = vec![(ReplicaId(0), 4), (ReplicaId(1), 2), (ReplicaId(3), 4)];
    let partials: Vec<_> =
        votes.iter().map(|&(r, p)| keys[r.index()].psign(p, &signing::qc_vote(&hash, 2, p)).unwrap()).collect();
    let qc = Arc::new(QuorumCertificate::new(2, hash, votes, combine(&partials).unwrap(), cfg.s()).unwrap());
    assert_eq!(qc.prefix(), 4);
    assert!(qc.verify(&cfg, &ring));
    let bytes = raptr_core::codec::encode(&*qc);
    assert_eq!(bytes, raptr_core::codec::encode(&*qc.clone()));
    assert!(!bytes.is_empty());
}
