//! Non-interactive aggregate signatures with per-tag key shares.
//!
//! Every replica holds `M + 1` key pairs indexed by tag. A QC-vote for prefix
//! `p` is signed with the tag-`p` share, so the prefix claimed for each voter
//! in a certificate is bound by the signature itself.
//!
//! Two schemes are provided:
//!
//! * [`SchemeKind::Ed25519`]: one Ed25519 key pair per (signer, tag). The
//!   aggregate is the concatenation of the partial signatures ordered by
//!   signer, verified one by one.
//! * [`SchemeKind::Test`]: keyed SipHash tags folded with XOR. It is fast and
//!   deterministic but offers no security (public and secret shares are the
//!   same key). Use it only inside the simulator.

use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize, Serializer};
use siphasher::sip128::{Hasher128, SipHasher13};
use std::hash::Hasher;
use thiserror::Error;

use crate::codec::{self, Domain};
use crate::types::ReplicaId;

pub type Tag = u32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    #[default]
    Test,
    Ed25519,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("tag {tag} out of range [0, {max}]")]
    TagOutOfRange { tag: Tag, max: Tag },
}

/// Raw signature bytes: 16 for the test scheme, 64 for Ed25519.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SigBytes {
    len: u8,
    buf: [u8; 64],
}

impl SigBytes {
    fn from_slice(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 64];
        buf[..bytes.len()].copy_from_slice(bytes);
        SigBytes { len: bytes.len() as u8, buf }
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf[..self.len as usize]
    }

    /// Returns a copy with one bit flipped; used by tests and adversaries.
    pub fn with_flipped_bit(&self, bit: usize) -> Self {
        let mut out = *self;
        let idx = (bit / 8) % self.len.max(1) as usize;
        out.buf[idx] ^= 1 << (bit % 8);
        out
    }
}

impl fmt::Debug for SigBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(&self.as_slice()[..self.as_slice().len().min(4)]))
    }
}

impl Serialize for SigBytes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_bytes(self.as_slice())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize)]
pub struct PartialSignature {
    pub signer: ReplicaId,
    pub tag: Tag,
    pub bytes: SigBytes,
}

#[derive(Clone, PartialEq, Eq, Hash, Serialize)]
pub struct AggregateSignature {
    scheme: SchemeKind,
    bytes: Vec<u8>,
}

impl AggregateSignature {
    pub fn scheme(&self) -> SchemeKind {
        self.scheme
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Reassembles an aggregate from raw parts, e.g. after tampering in tests.
    pub fn from_parts(scheme: SchemeKind, bytes: Vec<u8>) -> Self {
        AggregateSignature { scheme, bytes }
    }
}

impl fmt::Debug for AggregateSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Agg({:?}, {} bytes)", self.scheme, self.bytes.len())
    }
}

#[derive(Clone)]
enum SecretInner {
    Test([u8; 16]),
    Ed25519(Box<SigningKey>),
}

#[derive(Clone)]
pub struct SecretKeyShare {
    signer: ReplicaId,
    tag: Tag,
    inner: SecretInner,
}

#[derive(Clone, PartialEq, Eq)]
enum PublicInner {
    Test([u8; 16]),
    Ed25519(VerifyingKey),
}

#[derive(Clone, PartialEq, Eq)]
pub struct PublicKeyShare {
    signer: ReplicaId,
    tag: Tag,
    inner: PublicInner,
}

impl PublicKeyShare {
    pub fn signer(&self) -> ReplicaId {
        self.signer
    }

    pub fn tag(&self) -> Tag {
        self.tag
    }
}

impl fmt::Debug for PublicKeyShare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pk({}, tag {})", self.signer, self.tag)
    }
}

/// All secret shares of one replica, indexed by tag.
#[derive(Clone)]
pub struct KeyShareSet {
    signer: ReplicaId,
    shares: Vec<SecretKeyShare>,
}

impl fmt::Debug for KeyShareSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyShareSet({}, {} tags)", self.signer, self.shares.len())
    }
}

impl KeyShareSet {
    pub fn signer(&self) -> ReplicaId {
        self.signer
    }

    pub fn max_tag(&self) -> Tag {
        self.shares.len() as Tag - 1
    }

    pub fn share(&self, tag: Tag) -> Result<&SecretKeyShare, CryptoError> {
        self.shares.get(tag as usize).ok_or(CryptoError::TagOutOfRange { tag, max: self.max_tag() })
    }

    pub fn psign(&self, tag: Tag, message: &[u8]) -> Result<PartialSignature, CryptoError> {
        Ok(psign(self.share(tag)?, message))
    }
}

/// Public shares of every replica.
#[derive(Clone, Debug)]
pub struct PublicKeyRing {
    scheme: SchemeKind,
    shares: Vec<Vec<PublicKeyShare>>,
}

impl PublicKeyRing {
    pub fn scheme(&self) -> SchemeKind {
        self.scheme
    }

    pub fn share(&self, signer: ReplicaId, tag: Tag) -> Option<&PublicKeyShare> {
        self.shares.get(signer.index())?.get(tag as usize)
    }

    pub fn len(&self) -> usize {
        self.shares.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shares.is_empty()
    }
}

fn key_seed(seed: u64, signer: ReplicaId, tag: Tag) -> [u8; 32] {
    codec::hash_value(Domain::KeySeed, &(seed, signer, tag)).0
}

/// Derives key material for `n` replicas with tags `0..=max_tag` from `seed`.
pub fn generate_keys(scheme: SchemeKind, n: usize, max_tag: Tag, seed: u64) -> (Vec<KeyShareSet>, PublicKeyRing) {
    let mut secrets = Vec::with_capacity(n);
    let mut publics = Vec::with_capacity(n);
    for i in 0..n as u32 {
        let signer = ReplicaId(i);
        let mut sk = Vec::new();
        let mut pk = Vec::new();
        for tag in 0..=max_tag {
            let material = key_seed(seed, signer, tag);
            let (s, p) = match scheme {
                SchemeKind::Test => {
                    let mut k = [0u8; 16];
                    k.copy_from_slice(&material[..16]);
                    (SecretInner::Test(k), PublicInner::Test(k))
                }
                SchemeKind::Ed25519 => {
                    let signing = SigningKey::from_bytes(&material);
                    let verifying = signing.verifying_key();
                    (SecretInner::Ed25519(Box::new(signing)), PublicInner::Ed25519(verifying))
                }
            };
            sk.push(SecretKeyShare { signer, tag, inner: s });
            pk.push(PublicKeyShare { signer, tag, inner: p });
        }
        secrets.push(KeyShareSet { signer, shares: sk });
        publics.push(pk);
    }
    (secrets, PublicKeyRing { scheme, shares: publics })
}

fn test_tag(key: &[u8; 16], signer: ReplicaId, tag: Tag, message: &[u8]) -> u128 {
    let mut h = SipHasher13::new_with_key(key);
    h.write_u32(signer.0);
    h.write_u32(tag);
    h.write(message);
    h.finish128().as_u128()
}

fn ed_message(signer: ReplicaId, tag: Tag, message: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + message.len());
    buf.extend_from_slice(&signer.0.to_le_bytes());
    buf.extend_from_slice(&tag.to_le_bytes());
    buf.extend_from_slice(message);
    buf
}

/// Signs `message` with one secret share. The share's own tag is used.
pub fn psign(share: &SecretKeyShare, message: &[u8]) -> PartialSignature {
    let bytes = match &share.inner {
        SecretInner::Test(k) => SigBytes::from_slice(&test_tag(k, share.signer, share.tag, message).to_le_bytes()),
        SecretInner::Ed25519(k) => {
            SigBytes::from_slice(&k.sign(&ed_message(share.signer, share.tag, message)).to_bytes())
        }
    };
    PartialSignature { signer: share.signer, tag: share.tag, bytes }
}

pub fn pver(public: &PublicKeyShare, tag: Tag, message: &[u8], partial: &PartialSignature) -> bool {
    if public.tag != tag || partial.tag != tag || partial.signer != public.signer {
        return false;
    }
    match &public.inner {
        PublicInner::Test(k) => partial.bytes.as_slice() == test_tag(k, public.signer, tag, message).to_le_bytes(),
        PublicInner::Ed25519(vk) => {
            let Ok(raw) = <[u8; 64]>::try_from(partial.bytes.as_slice()) else {
                return false;
            };
            vk.verify(&ed_message(public.signer, tag, message), &Signature::from_bytes(&raw)).is_ok()
        }
    }
}

/// Combines partial signatures. Returns `None` for an empty set, a repeated
/// signer, or partials from different schemes.
pub fn combine(partials: &[PartialSignature]) -> Option<AggregateSignature> {
    if partials.is_empty() {
        return None;
    }
    let mut sorted: Vec<&PartialSignature> = partials.iter().collect();
    sorted.sort_by_key(|p| p.signer);
    if sorted.windows(2).any(|w| w[0].signer == w[1].signer) {
        return None;
    }
    let len = sorted[0].bytes.len as usize;
    if sorted.iter().any(|p| p.bytes.len as usize != len) {
        return None;
    }
    match len {
        16 => {
            let mut acc = 0u128;
            for p in &sorted {
                acc ^= u128::from_le_bytes(p.bytes.as_slice().try_into().ok()?);
            }
            Some(AggregateSignature { scheme: SchemeKind::Test, bytes: acc.to_le_bytes().to_vec() })
        }
        64 => {
            let mut bytes = Vec::with_capacity(64 * sorted.len());
            for p in &sorted {
                bytes.extend_from_slice(p.bytes.as_slice());
            }
            Some(AggregateSignature { scheme: SchemeKind::Ed25519, bytes })
        }
        _ => None,
    }
}

/// One claimed `(public share, tag, message)` triple.
#[derive(Clone, Copy, Debug)]
pub struct Claim<'a> {
    pub public: &'a PublicKeyShare,
    pub tag: Tag,
    pub message: &'a [u8],
}

/// Accepts iff `aggregate` combines genuine partials for exactly `claims`.
pub fn verify_agg(claims: &[Claim<'_>], aggregate: &AggregateSignature) -> bool {
    if claims.is_empty() {
        return false;
    }
    let mut sorted: Vec<&Claim<'_>> = claims.iter().collect();
    sorted.sort_by_key(|c| c.public.signer);
    if sorted.windows(2).any(|w| w[0].public.signer == w[1].public.signer) {
        return false;
    }
    if sorted.iter().any(|c| c.public.tag != c.tag) {
        return false;
    }
    match aggregate.scheme {
        SchemeKind::Test => {
            let Ok(raw) = <[u8; 16]>::try_from(aggregate.bytes.as_slice()) else {
                return false;
            };
            let mut acc = 0u128;
            for c in &sorted {
                let PublicInner::Test(k) = &c.public.inner else {
                    return false;
                };
                acc ^= test_tag(k, c.public.signer, c.tag, c.message);
            }
            acc == u128::from_le_bytes(raw)
        }
        SchemeKind::Ed25519 => {
            if aggregate.bytes.len() != 64 * sorted.len() {
                return false;
            }
            sorted.iter().zip(aggregate.bytes.chunks_exact(64)).all(|(c, chunk)| {
                let PublicInner::Ed25519(vk) = &c.public.inner else {
                    return false;
                };
                let raw: [u8; 64] = chunk.try_into().expect("64-byte chunk");
                vk.verify(&ed_message(c.public.signer, c.tag, c.message), &Signature::from_bytes(&raw)).is_ok()
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(scheme: SchemeKind) -> (Vec<KeyShareSet>, PublicKeyRing) {
        generate_keys(scheme, 4, 4, 7)
    }

    #[test]
    fn prefix_tagged_vote_verifies_under_matching_share() {
        for scheme in [SchemeKind::Test, SchemeKind::Ed25519] {
            let (sk, ring) = setup(scheme);
            let sig = sk[0].psign(3, b"block").unwrap();
            assert!(pver(ring.share(ReplicaId(0), 3).unwrap(), 3, b"block", &sig));
            assert!(!pver(ring.share(ReplicaId(0), 2).unwrap(), 2, b"block", &sig));
            assert!(!pver(ring.share(ReplicaId(0), 3).unwrap(), 3, b"blocc", &sig));
        }
    }

    #[test]
    fn tag_out_of_range_is_rejected() {
        let (sk, _) = setup(SchemeKind::Test);
        assert_eq!(sk[1].psign(5, b"m").unwrap_err(), CryptoError::TagOutOfRange { tag: 5, max: 4 });
    }

    #[test]
    fn exhaustive_tag_mismatch() {
        for scheme in [SchemeKind::Test, SchemeKind::Ed25519] {
            let (sk, ring) = setup(scheme);
            for signed in 0..=4 {
                let sig = sk[2].psign(signed, b"h").unwrap();
                for checked in 0..=4 {
                    let ok = pver(ring.share(ReplicaId(2), checked).unwrap(), checked, b"h", &sig);
                    assert_eq!(ok, signed == checked, "signed {signed} checked {checked}");
                }
            }
        }
    }

    #[test]
    fn all_pairs_signer_mismatch() {
        for scheme in [SchemeKind::Test, SchemeKind::Ed25519] {
            let (sk, ring) = setup(scheme);
            for a in 0..4u32 {
                let sig = sk[a as usize].psign(0, b"h").unwrap();
                for b in 0..4u32 {
                    let ok = pver(ring.share(ReplicaId(b), 0).unwrap(), 0, b"h", &sig);
                    assert_eq!(ok, a == b);
                }
            }
        }
    }

    #[test]
    fn combine_edge_cases() {
        let (sk, _) = setup(SchemeKind::Test);
        assert!(combine(&[]).is_none());
        let a = sk[0].psign(1, b"m").unwrap();
        assert!(combine(&[a, a]).is_none());
        let b = sk[1].psign(1, b"m").unwrap();
        assert!(combine(&[a, b]).is_some());
        let (ed, _) = setup(SchemeKind::Ed25519);
        let c = ed[2].psign(1, b"m").unwrap();
        assert!(combine(&[a, c]).is_none());
    }

    #[test]
    fn test_scheme_is_deterministic() {
        let (sk1, _) = setup(SchemeKind::Test);
        let (sk2, _) = setup(SchemeKind::Test);
        assert_eq!(sk1[3].psign(2, b"x").unwrap(), sk2[3].psign(2, b"x").unwrap());
    }

    #[test]
    fn aggregate_roundtrip_and_missing_signer() {
        for scheme in [SchemeKind::Test, SchemeKind::Ed25519] {
            let (sk, ring) = setup(scheme);
            let tags = [3u32, 4, 3];
            let parts: Vec<_> = (0..3).map(|i| sk[i].psign(tags[i], b"H(B)").unwrap()).collect();
            let agg = combine(&parts).unwrap();
            let claims: Vec<Claim<'_>> = (0..3)
                .map(|i| Claim {
                    public: ring.share(ReplicaId(i as u32), tags[i]).unwrap(),
                    tag: tags[i],
                    message: b"H(B)",
                })
                .collect();
            assert!(verify_agg(&claims, &agg));
            assert!(!verify_agg(&claims[..2], &agg));
            let mut altered = claims.clone();
            altered[0] = Claim { public: ring.share(ReplicaId(0), 4).unwrap(), tag: 4, message: b"H(B)" };
            assert!(!verify_agg(&altered, &agg));
        }
    }
}
