//! Wire messages exchanged between replicas.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::block::Block;
use crate::cert::{EntryReason, ProofOfAvailability, QuorumCertificate};
use crate::codec::{self, Digest};
use crate::crypto::PartialSignature;
use crate::types::{Batch, Prefix, Round, SeqNum};

/// Logical connection a message travels on. Each channel has its own delay
/// model and serialization queue.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    Consensus,
    QsControl,
    Data,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Consensus, Channel::QsControl, Channel::Data];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum FetchItem {
    Block(Digest),
    Batch(Digest),
}

#[derive(Clone, PartialEq, Eq, Serialize)]
pub enum Message {
    Batch(Arc<Batch>),
    PoaVote { sn: SeqNum, sig: PartialSignature },
    Poa(Arc<ProofOfAvailability>),
    FetchRequest { id: u64, items: Vec<FetchItem> },
    FetchResponse { id: u64, blocks: Vec<Arc<Block>>, batches: Vec<Arc<Batch>> },
    Propose(Arc<Block>),
    AdvanceRound(EntryReason),
    QcVote { round: Round, prefix: Prefix, hash: Digest, sig: PartialSignature },
    CcVote { qc: Arc<QuorumCertificate>, sig: PartialSignature },
    TcVote { round: Round, reason: EntryReason, qc: Arc<QuorumCertificate>, sig: PartialSignature },
}

impl Message {
    pub fn channel(&self) -> Channel {
        match self {
            Message::Batch(_) | Message::FetchResponse { .. } => Channel::Data,
            Message::PoaVote { .. } | Message::Poa(_) | Message::FetchRequest { .. } => Channel::QsControl,
            _ => Channel::Consensus,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Batch(_) => "batch",
            Message::PoaVote { .. } => "poa-vote",
            Message::Poa(_) => "poa",
            Message::FetchRequest { .. } => "fetch-request",
            Message::FetchResponse { .. } => "fetch-response",
            Message::Propose(_) => "propose",
            Message::AdvanceRound(_) => "advance-round",
            Message::QcVote { .. } => "qc-vote",
            Message::CcVote { .. } => "cc-vote",
            Message::TcVote { .. } => "tc-vote",
        }
    }

    /// Encoded size in bytes.
    pub fn wire_size(&self) -> usize {
        codec::encoded_len(self)
    }

    /// One-line description used in traces.
    pub fn summary(&self) -> String {
        match self {
            Message::Batch(b) => format!("batch {}#{} ({} txs)", b.author, b.sn, b.txs.len()),
            Message::PoaVote { sn, .. } => format!("poa-vote sn {sn}"),
            Message::Poa(p) => format!("{p:?}"),
            Message::FetchRequest { id, items } => format!("fetch-request {id} ({} items)", items.len()),
            Message::FetchResponse { id, blocks, batches } => {
                format!("fetch-response {id} ({} blocks, {} batches)", blocks.len(), batches.len())
            }
            Message::Propose(b) => format!("propose {b:?}"),
            Message::AdvanceRound(r) => format!("advance-round {r:?}"),
            Message::QcVote { round, prefix, hash, .. } => format!("qc-vote r{round} p{prefix} {hash:?}"),
            Message::CcVote { qc, .. } => format!("cc-vote {:?}", qc.rank()),
            Message::TcVote { round, qc, .. } => format!("tc-vote r{round} qc {:?}", qc.rank()),
        }
    }
}

impl std::fmt::Debug for Message {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.summary())
    }
}
