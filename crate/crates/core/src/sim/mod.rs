//! Deterministic discrete-event simulation of a replica group.
//!
//! Events are ordered by `(time, insertion sequence)`, and every random
//! choice comes from generators seeded by the scenario seed, so a scenario
//! and seed fully determine a run.

pub mod adversary;
pub mod network;
pub mod observer;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::block::Block;
use crate::cert::QuorumCertificate;
use crate::codec::{hash_value, Domain};
use crate::crypto::{generate_keys, PublicKeyRing};
use crate::effects::{Action, Effects, Timer};
use crate::message::Message;
use crate::metrics::{FinishContext, MetricsCollector, RunMetrics};
use crate::replica::{Replica, ReplicaSnapshot};
use crate::scenario::{AdversaryBehavior, Fault, ScenarioConfig};
use crate::types::{Rank, ReplicaId, Round, SimTime, Transaction};

use adversary::Adversary;
use network::{Network, Route};
use observer::{Observer, ObserverConfig, Violation};

/// Lines of event trace kept for counterexamples.
pub const TRACE_LIMIT: usize = 2000;
const PRUNE_EVERY: u64 = 4096;
const PRUNE_LAG: Round = 10;

#[derive(Clone, Debug)]
enum Event {
    Start(ReplicaId),
    Deliver { from: ReplicaId, to: ReplicaId, msg: Arc<Message> },
    Timer { to: ReplicaId, timer: Timer },
    Submit(ReplicaId),
    Crash(ReplicaId),
    Corrupt(ReplicaId, AdversaryBehavior),
}

impl Event {
    fn target(&self) -> Option<ReplicaId> {
        match self {
            Event::Start(id) => Some(*id),
            Event::Deliver { to, .. } | Event::Timer { to, .. } => Some(*to),
            _ => None,
        }
    }

    fn describe(&self) -> String {
        match self {
            Event::Start(id) => format!("{id} start"),
            Event::Deliver { from, to, msg } => format!("{to} <- {from}: {}", msg.summary()),
            Event::Timer { to, timer } => format!("{to} timer {timer:?}"),
            Event::Submit(id) => format!("{id} client submit"),
            Event::Crash(id) => format!("{id} crashes"),
            Event::Corrupt(id, b) => format!("{id} turns {b:?}"),
        }
    }
}

struct Scheduled {
    time: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeStatus {
    Honest,
    Crashed,
    Byzantine,
    /// Scheduled to crash or turn Byzantine later.
    Faulty,
}

struct Node {
    replica: Replica,
    crashed: bool,
    adversary: Option<Adversary>,
    busy_until: SimTime,
}

enum Input {
    Start,
    Message(ReplicaId, Arc<Message>),
    Timer(Timer),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SimOptions {
    pub trace: bool,
    /// Report hop counts using this fixed one-hop delay.
    pub hop: Option<SimTime>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicaReport {
    pub id: ReplicaId,
    pub status: NodeStatus,
    pub behavior: Option<AdversaryBehavior>,
    pub r_cur: Round,
    pub r_timeout: Round,
    pub qc_high: Rank,
    pub qc_committed: Rank,
    pub delivered_batches: usize,
    pub log_digest: String,
    pub fetch_requests: u64,
}

/// Everything a finished run produced.
pub struct SimOutput {
    pub end_time: SimTime,
    pub events: u64,
    pub halted_on_violation: bool,
    pub violations: Vec<Violation>,
    pub violation_count: usize,
    pub liveness_violations: usize,
    pub first_safety_violation: Option<Violation>,
    pub metrics: RunMetrics,
    pub replicas: Vec<ReplicaReport>,
    pub trace: Option<Vec<String>>,
    pub collector: MetricsCollector,
}

pub struct Simulation {
    scenario: ScenarioConfig,
    options: SimOptions,
    honest: Vec<bool>,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    nodes: Vec<Node>,
    ring: Arc<PublicKeyRing>,
    network: Network,
    observer: Observer,
    metrics: MetricsCollector,
    load_rng: ChaCha8Rng,
    next_tx: u64,
    events: u64,
    trace: Option<VecDeque<String>>,
    halted: bool,
    reached_rounds: bool,
    pruned_at: Round,
}

fn derive_seed(seed: u64, label: &str) -> u64 {
    let d = hash_value(Domain::KeySeed, &(seed, label));
    u64::from_le_bytes(d.0[..8].try_into().expect("8 bytes"))
}

fn leader_of(round: Round, n: usize) -> ReplicaId {
    ReplicaId(((round.max(1) - 1) % n as u64) as u32)
}

impl Simulation {
    /// Builds a simulation; the scenario must already be validated.
    pub fn new(scenario: ScenarioConfig, options: SimOptions) -> Self {
        let cfg = Arc::new(scenario.protocol.clone());
        let n = cfg.n;
        let seed = scenario.seed;
        let faulty = scenario.faulty_replicas();
        let honest: Vec<bool> = (0..n as u32).map(|i| !faulty.contains(&ReplicaId(i))).collect();

        let (keys, ring) = generate_keys(scenario.signature_scheme, n, cfg.m(), derive_seed(seed, "keys"));
        let ring = Arc::new(ring);
        let replica_seed = derive_seed(seed, "replicas");
        let mut nodes: Vec<Node> = keys
            .into_iter()
            .enumerate()
            .map(|(i, k)| Node {
                replica: Replica::new(ReplicaId(i as u32), cfg.clone(), k, ring.clone(), replica_seed),
                crashed: false,
                adversary: None,
                busy_until: 0,
            })
            .collect();

        let commit_bound = scenario.checks.commit_bound.then(|| 5 * cfg.delta + cfg.qc_vote_delay());
        let observer = Observer::new(ObserverConfig {
            n,
            delta: cfg.delta,
            honest: honest.clone(),
            m: cfg.m(),
            gst: scenario.network.gst,
            commit_bound,
            leader_of,
        });
        let network =
            Network::new(scenario.network.clone(), cfg.delta, n, &scenario.faults, derive_seed(seed, "network"));

        let mut sim = Simulation {
            options,
            honest: honest.clone(),
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes: Vec::new(),
            ring,
            network,
            observer,
            metrics: MetricsCollector::new(n, honest),
            load_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "load")),
            next_tx: 0,
            events: 0,
            trace: options.trace.then(VecDeque::new),
            halted: false,
            reached_rounds: false,
            pruned_at: 0,
            scenario,
        };

        for fault in sim.scenario.faults.clone() {
            match fault {
                Fault::Crash { replica, at } => sim.schedule(at, Event::Crash(ReplicaId(replica))),
                Fault::Byzantine { replica, behavior, at } => {
                    sim.schedule(at, Event::Corrupt(ReplicaId(replica), behavior))
                }
                Fault::ClockSkew { replica, factor } => nodes[replica as usize].replica.set_timer_scale(factor),
                _ => {}
            }
        }
        sim.nodes = nodes;
        for i in 0..n as u32 {
            sim.schedule(0, Event::Start(ReplicaId(i)));
        }
        let load = sim.scenario.load.clone();
        let submitters: Vec<u32> = load.submitters.clone().unwrap_or_else(|| (0..n as u32).collect());
        for id in submitters {
            let offset = sim.load_rng.random_range(0..load.interval);
            sim.schedule(load.start + offset, Event::Submit(ReplicaId(id)));
        }
        sim
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn replica(&self, id: ReplicaId) -> &Replica {
        &self.nodes[id.index()].replica
    }

    pub fn observer(&self) -> &Observer {
        &self.observer
    }

    pub fn ring(&self) -> &Arc<PublicKeyRing> {
        &self.ring
    }

    pub fn is_honest(&self, id: ReplicaId) -> bool {
        self.honest[id.index()]
    }

    fn schedule(&mut self, time: SimTime, event: Event) {
        self.seq += 1;
        self.queue.push(Scheduled { time, seq: self.seq, event });
    }

    /// Runs to the horizon or until a stop condition holds.
    pub fn run(&mut self) {
        let limit = self.scenario.horizon.time;
        self.run_until(limit);
    }

    /// Processes events up to time `limit`. Returns whether the run can
    /// continue.
    pub fn run_until(&mut self, limit: SimTime) -> bool {
        let limit = limit.min(self.scenario.horizon.time);
        while !self.halted && !self.reached_rounds {
            match self.queue.peek() {
                Some(top) if top.time <= limit => {}
                _ => break,
            }
            let Scheduled { time, event, .. } = self.queue.pop().expect("peeked");
            self.now = time;
            self.handle(event);
            self.events += 1;
            if self.observer.first_safety_violation().is_some() {
                self.halted = true;
            }
            if self.events % PRUNE_EVERY == 0 {
                self.check_rounds();
                self.prune();
            }
        }
        if !self.halted && !self.reached_rounds {
            self.now = self.now.max(limit);
        }
        !self.halted && !self.reached_rounds && self.now < self.scenario.horizon.time
    }

    fn check_rounds(&mut self) {
        if let Some(target) = self.scenario.horizon.rounds {
            let min = self.min_honest(|r| r.r_cur());
            if min >= target {
                self.reached_rounds = true;
            }
        }
    }

    fn min_honest(&self, f: impl Fn(&Replica) -> Round) -> Round {
        self.nodes.iter().enumerate().filter(|(i, _)| self.honest[*i]).map(|(_, n)| f(&n.replica)).min().unwrap_or(0)
    }

    /// Drops batch contents every honest replica delivered long ago.
    fn prune(&mut self) {
        let stable = self.min_honest(|r| r.delivered_round());
        if stable >= self.pruned_at + 2 * PRUNE_LAG {
            let floor = stable - PRUNE_LAG;
            for node in &mut self.nodes {
                node.replica.prune(floor);
            }
            self.pruned_at = stable;
        }
    }

    fn handle(&mut self, event: Event) {
        let cost = self.scenario.network.processing_cost;
        if cost > 0 {
            if let Some(to) = event.target() {
                let busy = self.nodes[to.index()].busy_until;
                if busy > self.now {
                    self.schedule(busy, event);
                    return;
                }
            }
        }
        if let Some(trace) = &mut self.trace {
            if trace.len() >= TRACE_LIMIT {
                trace.pop_front();
            }
            trace.push_back(format!("t={} {}", self.now, event.describe()));
        }
        match event {
            Event::Start(id) => self.step(id, Input::Start),
            Event::Deliver { from, to, msg } => self.step(to, Input::Message(from, msg)),
            Event::Timer { to, timer } => self.step(to, Input::Timer(timer)),
            Event::Submit(id) => self.submit(id),
            Event::Crash(id) => self.nodes[id.index()].crashed = true,
            Event::Corrupt(id, behavior) => {
                let adv = Adversary::new(behavior, id, self.nodes.len(), derive_seed(self.scenario.seed, "adversary"));
                self.nodes[id.index()].adversary = Some(adv);
            }
        }
        if self.scenario.horizon.rounds.is_some() && self.events % 64 == 0 {
            self.check_rounds();
        }
    }

    fn submit(&mut self, id: ReplicaId) {
        let load = &self.scenario.load;
        let (count, size, interval, stop) = (load.txs_per_submit, load.tx_size, load.interval, load.stop);
        for _ in 0..count {
            let tx = Transaction::with_size(self.next_tx, size);
            self.metrics.on_submit(self.next_tx, id, self.now);
            self.next_tx += 1;
            let node = &mut self.nodes[id.index()];
            if !node.crashed {
                node.replica.on_client_tx(tx);
            }
        }
        let next = self.now + interval;
        if stop.map_or(true, |s| next < s) && next <= self.scenario.horizon.time {
            self.schedule(next, Event::Submit(id));
        }
    }

    fn step(&mut self, id: ReplicaId, input: Input) {
        let now = self.now;
        let node = &mut self.nodes[id.index()];
        if node.crashed || node.adversary.as_ref().is_some_and(|a| !a.is_active()) {
            return;
        }
        let mut fx = Effects::new();
        let mut incoming = None;
        match input {
            Input::Start => node.replica.start(now, &mut fx),
            Input::Message(from, msg) => {
                node.replica.on_message(from, &msg, now, &mut fx);
                incoming = Some(msg);
            }
            Input::Timer(timer) => node.replica.on_timer(timer, now, &mut fx),
        }
        let mut actions = fx.take();
        if let Some(adv) = node.adversary.as_mut() {
            actions = adv.transform(&node.replica, actions, incoming.as_ref(), now);
        }
        let snapshot = node.replica.snapshot();
        let depart = now + self.scenario.network.processing_cost;
        node.busy_until = depart;
        self.apply(id, actions, &snapshot, depart);
        self.observer.after_step(id, snapshot, now);
    }

    fn apply(&mut self, id: ReplicaId, actions: Vec<Action>, snapshot: &ReplicaSnapshot, depart: SimTime) {
        let now = self.now;
        for action in actions {
            match action {
                Action::Send { to, msg } => {
                    self.observer.on_send(id, &msg, now);
                    self.transmit(id, to, msg, depart);
                }
                Action::Multicast { msg } => {
                    self.observer.on_send(id, &msg, now);
                    for to in 0..self.nodes.len() as u32 {
                        self.transmit(id, ReplicaId(to), msg.clone(), depart);
                    }
                }
                Action::SetTimer { timer, after } => self.schedule(depart + after, Event::Timer { to: id, timer }),
                Action::Deliver { batch, round } => {
                    self.observer.on_deliver(id, &batch, now);
                    self.metrics.on_deliver(id, &batch, round, now);
                }
                Action::Observe(obs) => {
                    self.observer.on_observation(id, &obs, snapshot, now);
                    self.metrics.on_observation(id, &obs, self.observer.store(), now);
                }
            }
        }
    }

    fn transmit(&mut self, from: ReplicaId, to: ReplicaId, msg: Arc<Message>, at: SimTime) {
        let channel = msg.channel();
        match self.network.route(from, to, channel, || msg.wire_size(), at) {
            Route::Deliver { at: arrival } => {
                let delta = self.scenario.protocol.delta;
                if at >= self.network.gst()
                    && self.honest[from.index()]
                    && self.honest[to.index()]
                    && arrival > at + delta
                {
                    self.observer.on_late_message(from, to, at, arrival);
                }
                self.schedule(arrival, Event::Deliver { from, to, msg });
            }
            Route::Dropped => {}
        }
    }

    /// Test hook: makes `replica` commit `qc` on `block` without any checks.
    #[doc(hidden)]
    pub fn inject_commit(&mut self, replica: ReplicaId, block: Arc<Block>, qc: Arc<QuorumCertificate>) {
        self.observer.add_block(block.clone());
        let mut fx = Effects::new();
        let node = &mut self.nodes[replica.index()];
        node.replica.inject_commit(block, qc, &mut fx);
        let snapshot = node.replica.snapshot();
        let actions = fx.take();
        let now = self.now;
        self.apply(replica, actions, &snapshot, now);
        if self.observer.first_safety_violation().is_some() {
            self.halted = true;
        }
    }

    pub fn end_time(&self) -> SimTime {
        if self.halted || self.reached_rounds {
            self.now
        } else {
            self.now.max(self.scenario.horizon.time)
        }
    }

    pub fn finish(mut self) -> SimOutput {
        let end = self.end_time();
        let delta = self.scenario.protocol.delta;
        if !self.halted {
            let net = &self.network;
            let slack = self.scenario.checks.liveness_slack * delta;
            self.observer.finish(end, slack, self.scenario.checks.liveness, &|a, b| net.glitch_between(a, b));
        }
        let reference = (0..self.nodes.len()).find(|i| self.honest[*i]).map(|i| ReplicaId(i as u32));
        let stats = self.network.stats();
        let metrics = self.metrics.finish(FinishContext {
            end,
            store: self.observer.store(),
            reference_committed: reference.map(|r| &**self.nodes[r.index()].replica.qc_committed()),
            reference_commit_times: reference.map(|r| self.observer.commit_times(r)),
            messages: stats.sent,
            dropped: stats.dropped,
            hop: self.options.hop,
        });
        let replicas = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                let id = ReplicaId(i as u32);
                let r = &node.replica;
                let status = if self.honest[i] {
                    NodeStatus::Honest
                } else if node.crashed {
                    NodeStatus::Crashed
                } else if node.adversary.is_some() {
                    NodeStatus::Byzantine
                } else {
                    NodeStatus::Faulty
                };
                ReplicaReport {
                    id,
                    status,
                    behavior: node.adversary.as_ref().map(|a| a.behavior()),
                    r_cur: r.r_cur(),
                    r_timeout: r.r_timeout(),
                    qc_high: r.qc_high().rank(),
                    qc_committed: r.qc_committed().rank(),
                    delivered_batches: self.observer.delivered_count(id),
                    log_digest: self.observer.log_digest(id).to_hex(),
                    fetch_requests: r.fetch_requests_sent(),
                }
            })
            .collect();
        SimOutput {
            end_time: end,
            events: self.events,
            halted_on_violation: self.halted,
            violations: self.observer.violations().to_vec(),
            violation_count: self.observer.violation_count(),
            liveness_violations: self.observer.liveness_violation_count(),
            first_safety_violation: self.observer.first_safety_violation().cloned(),
            metrics,
            replicas,
            trace: self.trace.map(Vec::from),
            collector: self.metrics,
        }
    }
}
