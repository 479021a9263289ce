//! Fixtures shared by the benchmarks.

use raptr_core::cert::signing;
use raptr_core::crypto::{combine, generate_keys, PublicKeyRing};
use raptr_core::{Digest, Prefix, ProtocolConfig, QuorumCertificate, ReplicaId, ScenarioConfig, SchemeKind, Variant};

/// A QC signed by a quorum of `3f + 1` replicas with mixed prefixes.
pub fn signed_qc(scheme: SchemeKind, f: usize) -> (ProtocolConfig, PublicKeyRing, QuorumCertificate) {
    let cfg = ProtocolConfig::new(f, Variant::Raptr);
    let (keys, ring) = generate_keys(scheme, cfg.n, cfg.m(), 1);
    let hash = Digest([3; 32]);
    let votes: Vec<(ReplicaId, Prefix)> =
        (0..cfg.quorum()).map(|i| (ReplicaId(i as u32), (i as Prefix) % (cfg.m() + 1))).collect();
    let partials: Vec<_> = votes
        .iter()
        .map(|&(r, p)| keys[r.index()].psign(p, &signing::qc_vote(&hash, 7, p)).expect("tag in range"))
        .collect();
    let sig = combine(&partials).expect("distinct signers");
    let qc = QuorumCertificate::new(7, hash, votes, sig, cfg.s()).expect("quorum of votes");
    (cfg, ring, qc)
}

/// A fault-free run of `rounds` rounds with fixed delays.
pub fn short_run(f: usize, variant: Variant, rounds: u64) -> ScenarioConfig {
    let mut sc = ScenarioConfig::fault_free(f, variant);
    sc.horizon.time = 2 * sc.protocol.delta * rounds;
    sc
}
