//! Message delays, losses and link serialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap as HashMap;

use crate::message::Channel;
use crate::scenario::{DelayModel, Fault, NetworkConfig};
use crate::types::{ReplicaId, SimTime};

#[derive(Clone, Debug)]
struct DropRule {
    senders: Vec<bool>,
    receivers: Vec<bool>,
    channels: [bool; 3],
    rate: f64,
    from: SimTime,
    until: SimTime,
}

#[derive(Clone, Debug)]
struct PartitionRule {
    group_of: Vec<usize>,
    from: SimTime,
    until: SimTime,
}

/// Outcome of routing one message.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Deliver { at: SimTime },
    Dropped,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct NetStats {
    pub sent: [u64; 3],
    pub dropped: u64,
    pub bytes: u64,
}

pub struct Network {
    cfg: NetworkConfig,
    delta: SimTime,
    n: usize,
    rng: ChaCha8Rng,
    drops: Vec<DropRule>,
    partitions: Vec<PartitionRule>,
    busy: HashMap<(u32, u32, Channel), SimTime>,
    stats: NetStats,
}

fn members(n: usize, ids: &[u32]) -> Vec<bool> {
    let mut v = vec![false; n];
    for i in ids {
        v[*i as usize] = true;
    }
    v
}

impl Network {
    pub fn new(cfg: NetworkConfig, delta: SimTime, n: usize, faults: &[Fault], seed: u64) -> Self {
        let mut drops = Vec::new();
        let mut partitions = Vec::new();
        for fault in faults {
            match fault {
                Fault::Drop { replicas, rate, from, until } => drops.push(DropRule {
                    senders: members(n, replicas),
                    receivers: vec![true; n],
                    channels: [true; 3],
                    rate: *rate,
                    from: *from,
                    until: until.unwrap_or(SimTime::MAX),
                }),
                Fault::LinkDrop { senders, receivers, channels, rate, from, until } => {
                    let mut mask = [channels.is_none(); 3];
                    for ch in channels.iter().flatten() {
                        mask[ch.index()] = true;
                    }
                    drops.push(DropRule {
                        senders: members(n, senders),
                        receivers: members(n, receivers),
                        channels: mask,
                        rate: *rate,
                        from: *from,
                        until: until.unwrap_or(SimTime::MAX),
                    })
                }
                Fault::Partition { groups, from, until } => {
                    // Replicas outside every listed group form singleton groups.
                    let mut group_of: Vec<usize> = (0..n).map(|i| groups.len() + i).collect();
                    for (g, ids) in groups.iter().enumerate() {
                        for id in ids {
                            group_of[*id as usize] = g;
                        }
                    }
                    partitions.push(PartitionRule { group_of, from: *from, until: *until });
                }
                _ => {}
            }
        }
        Network {
            cfg,
            delta,
            n,
            rng: ChaCha8Rng::seed_from_u64(seed),
            drops,
            partitions,
            busy: HashMap::default(),
            stats: NetStats::default(),
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn gst(&self) -> SimTime {
        self.cfg.gst
    }

    /// Whether any drop rule or partition is active at `t`.
    pub fn glitch_at(&self, t: SimTime) -> bool {
        self.drops.iter().any(|d| d.rate > 0.0 && d.from <= t && t < d.until)
            || self.partitions.iter().any(|p| p.from <= t && t < p.until)
    }

    /// Whether a glitch window intersects `[from, until)`.
    pub fn glitch_between(&self, from: SimTime, until: SimTime) -> bool {
        self.drops.iter().any(|d| d.rate > 0.0 && d.from < until && from < d.until)
            || self.partitions.iter().any(|p| p.from < until && from < p.until)
    }

    fn sample(&mut self, model: &DelayModel, from: ReplicaId, to: ReplicaId) -> SimTime {
        match model {
            DelayModel::Fixed { value } => *value,
            DelayModel::Uniform { lo, hi } => self.rng.random_range(*lo..=*hi),
            DelayModel::Regions { regions, matrix, jitter } => {
                let base = matrix[regions[from.index()]][regions[to.index()]];
                let j = if *jitter > 0 { self.rng.random_range(0..=*jitter) } else { 0 };
                base + j
            }
        }
    }

    /// Decides whether and when a message sent at `now` arrives. `size` is
    /// only consulted when the channel has a bandwidth limit.
    pub fn route(
        &mut self,
        from: ReplicaId,
        to: ReplicaId,
        channel: Channel,
        size: impl FnOnce() -> usize,
        now: SimTime,
    ) -> Route {
        debug_assert!(from.index() < self.n && to.index() < self.n);
        let loopback = from == to;
        let before_gst = now < self.cfg.gst;
        if !loopback {
            if before_gst {
                if let Some(pre) = &self.cfg.pre_gst {
                    if pre.drop_rate > 0.0 && self.rng.random_bool(pre.drop_rate) {
                        self.stats.dropped += 1;
                        return Route::Dropped;
                    }
                }
            }
            if self
                .partitions
                .iter()
                .any(|p| p.from <= now && now < p.until && p.group_of[from.index()] != p.group_of[to.index()])
            {
                self.stats.dropped += 1;
                return Route::Dropped;
            }
            let mut dropped = false;
            for i in 0..self.drops.len() {
                let d = &self.drops[i];
                if d.senders[from.index()]
                    && d.receivers[to.index()]
                    && d.channels[channel.index()]
                    && d.from <= now
                    && now < d.until
                {
                    let rate = d.rate;
                    if rate >= 1.0 || (rate > 0.0 && self.rng.random_bool(rate)) {
                        dropped = true;
                        break;
                    }
                }
            }
            if dropped {
                self.stats.dropped += 1;
                return Route::Dropped;
            }
        }

        let mut depart = now;
        if let Some(bpt) = self.cfg.bandwidth.for_channel(channel) {
            let bytes = size() as u64;
            self.stats.bytes += bytes;
            let key = (from.0, to.0, channel);
            let start = self.busy.get(&key).copied().unwrap_or(0).max(now);
            depart = start + bytes.div_ceil(bpt.max(1));
            self.busy.insert(key, depart);
        }

        let delay = match (&self.cfg.pre_gst, before_gst) {
            (Some(pre), true) => self.rng.random_range(1..=pre.max_delay),
            _ => {
                let model = self.cfg.model_for(channel).clone();
                self.sample(&model, from, to).max(1)
            }
        };
        let mut at = depart + delay;
        if !before_gst {
            // After GST every message arrives within Δ, queueing included.
            at = at.min(now + self.delta);
        }
        self.stats.sent[channel.index()] += 1;
        Route::Deliver { at }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{Bandwidth, PreGst};

    fn net(cfg: NetworkConfig, faults: &[Fault]) -> Network {
        Network::new(cfg, 1000, 4, faults, 7)
    }

    #[test]
    fn fixed_delay_is_exact() {
        let mut n = net(NetworkConfig::fixed(300), &[]);
        for t in [0, 5, 1234] {
            assert_eq!(n.route(ReplicaId(0), ReplicaId(1), Channel::Data, || 10, t), Route::Deliver { at: t + 300 });
            assert_eq!(
                n.route(ReplicaId(2), ReplicaId(2), Channel::Consensus, || 10, t),
                Route::Deliver { at: t + 300 }
            );
        }
    }

    #[test]
    fn link_drop_is_directional_and_per_channel() {
        let fault = Fault::LinkDrop {
            senders: vec![0],
            receivers: vec![1],
            channels: Some(vec![Channel::Data]),
            rate: 1.0,
            from: 0,
            until: None,
        };
        let mut n = net(NetworkConfig::fixed(10), &[fault]);
        assert_eq!(n.route(ReplicaId(0), ReplicaId(1), Channel::Data, || 1, 0), Route::Dropped);
        assert!(matches!(n.route(ReplicaId(1), ReplicaId(0), Channel::Data, || 1, 0), Route::Deliver { .. }));
        assert!(matches!(n.route(ReplicaId(0), ReplicaId(1), Channel::Consensus, || 1, 0), Route::Deliver { .. }));
        assert!(matches!(n.route(ReplicaId(0), ReplicaId(0), Channel::Data, || 1, 0), Route::Deliver { .. }));
    }

    #[test]
    fn partition_heals() {
        let fault = Fault::Partition { groups: vec![vec![0, 1], vec![2, 3]], from: 100, until: 200 };
        let mut n = net(NetworkConfig::fixed(10), &[fault]);
        assert!(matches!(n.route(ReplicaId(0), ReplicaId(2), Channel::Consensus, || 1, 50), Route::Deliver { .. }));
        assert_eq!(n.route(ReplicaId(0), ReplicaId(2), Channel::Consensus, || 1, 150), Route::Dropped);
        assert!(matches!(n.route(ReplicaId(0), ReplicaId(1), Channel::Consensus, || 1, 150), Route::Deliver { .. }));
        assert!(matches!(n.route(ReplicaId(0), ReplicaId(2), Channel::Consensus, || 1, 200), Route::Deliver { .. }));
        assert!(n.glitch_at(150) && !n.glitch_at(200));
    }

    #[test]
    fn bandwidth_queues_and_respects_delta_after_gst() {
        let mut cfg = NetworkConfig::fixed(100);
        cfg.bandwidth = Bandwidth { data: Some(1), ..Default::default() };
        let mut n = net(cfg, &[]);
        assert_eq!(n.route(ReplicaId(0), ReplicaId(1), Channel::Data, || 300, 0), Route::Deliver { at: 400 });
        assert_eq!(n.route(ReplicaId(0), ReplicaId(1), Channel::Data, || 300, 0), Route::Deliver { at: 700 });
        assert_eq!(n.route(ReplicaId(0), ReplicaId(1), Channel::Data, || 300, 0), Route::Deliver { at: 1000 });
        assert_eq!(n.route(ReplicaId(0), ReplicaId(1), Channel::Data, || 300, 0), Route::Deliver { at: 1000 });
        // Other links are independent.
        assert_eq!(n.route(ReplicaId(0), ReplicaId(2), Channel::Data, || 300, 0), Route::Deliver { at: 400 });
    }

    #[test]
    fn pre_gst_delays_can_exceed_delta() {
        let mut cfg = NetworkConfig::fixed(100);
        cfg.gst = 50_000;
        cfg.pre_gst = Some(PreGst { max_delay: 20_000, drop_rate: 0.0 });
        let mut n = net(cfg, &[]);
        let late = (0..200).any(|_| match n.route(ReplicaId(0), ReplicaId(1), Channel::Consensus, || 1, 0) {
            Route::Deliver { at } => at > 1000,
            Route::Dropped => false,
        });
        assert!(late);
        assert_eq!(
            n.route(ReplicaId(0), ReplicaId(1), Channel::Consensus, || 1, 50_000),
            Route::Deliver { at: 50_100 }
        );
    }
}
