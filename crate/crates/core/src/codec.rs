//! Canonical encoding and domain-separated hashing.
//!
//! Values are encoded with BCS: fields in declaration order, sequences and
//! byte strings length-prefixed. The same encoding sizes simulated wire
//! messages.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Hash domains keep digests of different object kinds disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Domain {
    Batch = 1,
    Block = 2,
    Genesis = 3,
    Log = 4,
    Report = 5,
    KeySeed = 6,
}

pub fn encode<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    bcs::to_bytes(value).expect("canonical encoding of in-memory value")
}

pub fn encoded_len<T: Serialize + ?Sized>(value: &T) -> usize {
    bcs::serialized_size(value).expect("canonical encoding of in-memory value")
}

pub fn hash_bytes(domain: Domain, bytes: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update([domain as u8]);
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
    Digest(h.finalize().into())
}

pub fn hash_value<T: Serialize + ?Sized>(domain: Domain, value: &T) -> Digest {
    hash_bytes(domain, &encode(value))
}

/// Incremental hash over a delivered log: `h' = H(h || entry)`.
pub fn chain_hash(prev: &Digest, entry: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update([Domain::Log as u8]);
    h.update(prev.0);
    h.update(entry);
    Digest(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_is_length_prefixed_and_ordered() {
        assert_eq!(encode(&(1u8, vec![7u8, 8])), vec![1, 2, 7, 8]);
        assert_eq!(encode(&(2u32, 1u8)), vec![2, 0, 0, 0, 1]);
        assert_eq!(encoded_len(&vec![0u64; 3]), 1 + 24);
    }

    #[test]
    fn domains_separate_digests() {
        assert_ne!(hash_bytes(Domain::Batch, b"x"), hash_bytes(Domain::Block, b"x"));
        assert_eq!(hash_bytes(Domain::Batch, b"x"), hash_bytes(Domain::Batch, b"x"));
    }
}
