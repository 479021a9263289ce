//! Outputs of a replica step: messages, timers, deliveries and observations.

use std::sync::Arc;

use crate::block::Block;
use crate::cert::QuorumCertificate;
use crate::codec::Digest;
use crate::message::Message;
use crate::types::{Batch, BatchKey, Prefix, Rank, ReplicaId, Round, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Timer {
    /// QC-vote timer for a round; stale if `gen` no longer matches.
    QcVote {
        round: Round,
        gen: u64,
    },
    RoundTimeout {
        gen: u64,
    },
    BatchTick,
    FetchRetry {
        id: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReasonKind {
    FullQc,
    Cc,
    Tc,
}

/// Facts a replica reports to the simulator's observer and metrics.
#[derive(Clone, Debug)]
pub enum Observation {
    EnteredRound {
        round: Round,
        reason: ReasonKind,
    },
    Proposed {
        block: Arc<Block>,
        ready: Vec<(BatchKey, SimTime)>,
    },
    QcVoted {
        round: Round,
        prefix: Prefix,
        hash: Digest,
    },
    CcVoted {
        round: Round,
        qc: Rank,
    },
    TcVoted {
        round: Round,
        retransmit: bool,
    },
    QcFormed(Arc<QuorumCertificate>),
    TcFormed {
        round: Round,
    },
    /// A QC passed to the commit routine.
    Committed(Arc<QuorumCertificate>),
    BatchCreated(Arc<Batch>),
    FetchRequested {
        target: ReplicaId,
        items: usize,
    },
    Equivocation {
        author: ReplicaId,
    },
    Rejected {
        from: ReplicaId,
        kind: &'static str,
    },
    QcVoteTimer {
        round: Round,
        available: Prefix,
    },
}

#[derive(Clone, Debug)]
pub enum Action {
    Send {
        to: ReplicaId,
        msg: Arc<Message>,
    },
    /// Send to every replica, including the sender.
    Multicast {
        msg: Arc<Message>,
    },
    SetTimer {
        timer: Timer,
        after: SimTime,
    },
    Deliver {
        batch: Arc<Batch>,
        round: Round,
    },
    Observe(Observation),
}

/// Collects the actions of one step.
#[derive(Default, Debug)]
pub struct Effects {
    pub actions: Vec<Action>,
}

impl Effects {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, to: ReplicaId, msg: Message) {
        self.actions.push(Action::Send { to, msg: Arc::new(msg) });
    }

    pub fn multicast(&mut self, msg: Message) {
        self.actions.push(Action::Multicast { msg: Arc::new(msg) });
    }

    pub fn multicast_shared(&mut self, msg: Arc<Message>) {
        self.actions.push(Action::Multicast { msg });
    }

    pub fn timer(&mut self, timer: Timer, after: SimTime) {
        self.actions.push(Action::SetTimer { timer, after });
    }

    pub fn observe(&mut self, obs: Observation) {
        self.actions.push(Action::Observe(obs));
    }

    pub fn deliver(&mut self, batch: Arc<Batch>, round: Round) {
        self.actions.push(Action::Deliver { batch, round });
    }

    pub fn take(&mut self) -> Vec<Action> {
        std::mem::take(&mut self.actions)
    }
}
