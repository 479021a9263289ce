//! Prefix-consensus BFT replicas with a deterministic discrete-event simulator.
//!
//! The protocol core (`replica`, `quorum_store`, `cert`, `crypto`) is a set of
//! pure state machines driven by [`sim::Simulation`].

pub mod block;
pub mod cert;
pub mod codec;
pub mod crypto;
pub mod effects;
pub mod harness;
pub mod message;
pub mod metrics;
pub mod quorum_store;
pub mod replica;
pub mod scenario;
pub mod sim;
pub mod types;
pub mod variants;

pub use block::{Block, BlockPayload, BlockPrefix, BlockStore};
pub use cert::{
    certified_prefix, CommitCertificate, EntryReason, ProofOfAvailability, QuorumCertificate, TimeoutCertificate,
};
pub use codec::Digest;
pub use crypto::SchemeKind;
pub use harness::{run, RunOptions, SimReport};
pub use message::{Channel, Message};
pub use replica::Replica;
pub use scenario::ScenarioConfig;
pub use sim::Simulation;
pub use types::{
    Batch, BatchInfo, BatchKey, ConfigError, Prefix, ProtocolConfig, Rank, ReplicaId, Round, SeqNum, SimTime,
    Transaction, Variant,
};
