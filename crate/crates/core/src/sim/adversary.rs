//! Byzantine behaviors, implemented as rewrites of an otherwise correct
//! replica's outputs. Adversaries only sign with their own keys.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{Block, BlockPayload};
use crate::cert::signing;
use crate::effects::Action;
use crate::message::Message;
use crate::replica::Replica;
use crate::scenario::AdversaryBehavior;
use crate::types::{Batch, ReplicaId, SimTime};

const REPLAY_BUFFER: usize = 64;
const REPLAY_PROBABILITY: f64 = 0.2;
/// Sequence numbers used for fabricated batches, far above honest ones.
const FAKE_SN_BASE: u64 = 1 << 40;

pub struct Adversary {
    behavior: AdversaryBehavior,
    id: ReplicaId,
    n: usize,
    rng: ChaCha8Rng,
    replay: VecDeque<Arc<Message>>,
}

impl Adversary {
    pub fn new(behavior: AdversaryBehavior, id: ReplicaId, n: usize, seed: u64) -> Self {
        Adversary {
            behavior,
            id,
            n,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xad5e_0000 ^ id.0 as u64),
            replay: VecDeque::new(),
        }
    }

    pub fn behavior(&self) -> AdversaryBehavior {
        self.behavior
    }

    /// Whether the replica should process inputs at all.
    pub fn is_active(&self) -> bool {
        self.behavior != AdversaryBehavior::Silent
    }

    /// Rewrites the actions produced by `replica` for one input.
    pub fn transform(
        &mut self,
        replica: &Replica,
        actions: Vec<Action>,
        incoming: Option<&Arc<Message>>,
        now: SimTime,
    ) -> Vec<Action> {
        match self.behavior {
            AdversaryBehavior::Silent => Vec::new(),
            AdversaryBehavior::VoteWithholder => actions
                .into_iter()
                .filter(|a| match a {
                    Action::Send { msg, .. } | Action::Multicast { msg } => !is_vote(msg),
                    _ => true,
                })
                .collect(),
            AdversaryBehavior::SelectiveBatchSender => self.selective(replica, actions),
            AdversaryBehavior::EquivocatingProposer => self.equivocate(replica, actions, now),
            AdversaryBehavior::StaleVoteReplayer => self.replay(actions, incoming),
        }
    }

    fn selective(&mut self, replica: &Replica, actions: Vec<Action>) -> Vec<Action> {
        let next_leader = replica.config().leader(replica.r_cur() + 1);
        let mut out = Vec::with_capacity(actions.len());
        for action in actions {
            match action {
                Action::Multicast { msg } if matches!(*msg, Message::Batch(_)) => {
                    out.push(Action::Send { to: self.id, msg: msg.clone() });
                    if next_leader != self.id {
                        out.push(Action::Send { to: next_leader, msg });
                    }
                }
                Action::Send { to, msg } => match &*msg {
                    Message::FetchResponse { id, blocks, batches } => {
                        let batches = batches.iter().filter(|b| b.author != self.id).cloned().collect();
                        let msg = Message::FetchResponse { id: *id, blocks: blocks.clone(), batches };
                        out.push(Action::Send { to, msg: Arc::new(msg) });
                    }
                    _ => out.push(Action::Send { to, msg }),
                },
                other => out.push(other),
            }
        }
        out
    }

    fn equivocate(&mut self, replica: &Replica, actions: Vec<Action>, now: SimTime) -> Vec<Action> {
        let mut out = Vec::with_capacity(actions.len() + self.n);
        for action in actions {
            let Action::Multicast { msg } = &action else {
                out.push(action);
                continue;
            };
            let Message::Propose(block) = &**msg else {
                out.push(action);
                continue;
            };
            // A second block for the same round, backed by a fresh batch
            // that only its recipients receive.
            let fake = Arc::new(Batch::new(self.id, FAKE_SN_BASE + block.round(), now, Vec::new()));
            let mut payload = BlockPayload::empty(replica.config().m());
            payload.sub_blocks[0].push(fake.info());
            let twin = Arc::new(Block::new(block.round(), block.entry_reason().clone(), payload));
            let half = self.n / 2;
            for i in 0..self.n as u32 {
                let to = ReplicaId(i);
                if to == self.id || (i as usize) < half {
                    out.push(Action::Send { to, msg: msg.clone() });
                } else {
                    out.push(Action::Send { to, msg: Arc::new(Message::Batch(fake.clone())) });
                    out.push(Action::Send { to, msg: Arc::new(Message::Propose(twin.clone())) });
                }
            }
            // Vote for the twin as well, with the full prefix.
            let m = replica.config().m();
            let bytes = signing::qc_vote(&twin.digest(), twin.round(), m);
            if let Ok(sig) = replica.keys().psign(m, &bytes) {
                let vote = Message::QcVote { round: twin.round(), prefix: m, hash: twin.digest(), sig };
                out.push(Action::Multicast { msg: Arc::new(vote) });
            }
        }
        out
    }

    fn replay(&mut self, actions: Vec<Action>, incoming: Option<&Arc<Message>>) -> Vec<Action> {
        if let Some(msg) = incoming {
            if matches!(**msg, Message::Propose(_) | Message::CcVote { .. } | Message::TcVote { .. }) {
                self.remember(msg.clone());
            }
        }
        for action in &actions {
            if let Action::Send { msg, .. } | Action::Multicast { msg } = action {
                if is_vote(msg) || matches!(**msg, Message::Propose(_) | Message::AdvanceRound(_)) {
                    self.remember(msg.clone());
                }
            }
        }
        let mut out = actions;
        if !self.replay.is_empty() && self.rng.random_bool(REPLAY_PROBABILITY) {
            let pick = self.rng.random_range(0..self.replay.len());
            let msg = self.replay[pick].clone();
            if self.rng.random_bool(0.5) {
                out.push(Action::Multicast { msg });
            } else {
                let to = ReplicaId(self.rng.random_range(0..self.n as u32));
                out.push(Action::Send { to, msg });
            }
        }
        out
    }

    fn remember(&mut self, msg: Arc<Message>) {
        if self.replay.len() >= REPLAY_BUFFER {
            self.replay.pop_front();
        }
        self.replay.push_back(msg);
    }
}

fn is_vote(msg: &Message) -> bool {
    matches!(msg, Message::QcVote { .. } | Message::CcVote { .. } | Message::TcVote { .. })
}
