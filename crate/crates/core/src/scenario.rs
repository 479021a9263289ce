//! Declarative experiment descriptions, loaded from TOML.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::SchemeKind;
use crate::message::Channel;
use crate::types::{ConfigError, ProtocolConfig, ReplicaId, Round, SimTime, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DelayModel {
    Fixed {
        value: SimTime,
    },
    Uniform {
        lo: SimTime,
        hi: SimTime,
    },
    /// `matrix[region(a)][region(b)]` plus uniform jitter in `[0, jitter]`.
    Regions {
        regions: Vec<usize>,
        matrix: Vec<Vec<SimTime>>,
        jitter: SimTime,
    },
}

impl DelayModel {
    pub fn max_delay(&self) -> SimTime {
        match self {
            DelayModel::Fixed { value } => *value,
            DelayModel::Uniform { hi, .. } => *hi,
            DelayModel::Regions { matrix, jitter, .. } => matrix.iter().flatten().copied().max().unwrap_or(0) + jitter,
        }
    }

    pub fn min_delay(&self) -> SimTime {
        match self {
            DelayModel::Fixed { value } => *value,
            DelayModel::Uniform { lo, .. } => *lo,
            DelayModel::Regions { matrix, .. } => matrix.iter().flatten().copied().min().unwrap_or(0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelOverrides {
    #[serde(default)]
    pub consensus: Option<DelayModel>,
    #[serde(default)]
    pub qs_control: Option<DelayModel>,
    #[serde(default)]
    pub data: Option<DelayModel>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bandwidth {
    /// Bytes per tick on each link of the channel; absent means unlimited.
    #[serde(default)]
    pub consensus: Option<u64>,
    #[serde(default)]
    pub qs_control: Option<u64>,
    #[serde(default)]
    pub data: Option<u64>,
}

impl Bandwidth {
    pub fn for_channel(&self, channel: Channel) -> Option<u64> {
        match channel {
            Channel::Consensus => self.consensus,
            Channel::QsControl => self.qs_control,
            Channel::Data => self.data,
        }
    }
}

/// Adversarial network behavior before GST.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreGst {
    pub max_delay: SimTime,
    #[serde(default)]
    pub drop_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub delay: DelayModel,
    #[serde(default)]
    pub channels: ChannelOverrides,
    #[serde(default)]
    pub gst: SimTime,
    #[serde(default)]
    pub pre_gst: Option<PreGst>,
    #[serde(default)]
    pub bandwidth: Bandwidth,
    /// Ticks a replica spends on each event.
    #[serde(default)]
    pub processing_cost: SimTime,
}

impl NetworkConfig {
    pub fn fixed(delay: SimTime) -> Self {
        NetworkConfig {
            delay: DelayModel::Fixed { value: delay },
            channels: ChannelOverrides::default(),
            gst: 0,
            pre_gst: None,
            bandwidth: Bandwidth::default(),
            processing_cost: 0,
        }
    }

    pub fn model_for(&self, channel: Channel) -> &DelayModel {
        let o = match channel {
            Channel::Consensus => &self.channels.consensus,
            Channel::QsControl => &self.channels.qs_control,
            Channel::Data => &self.channels.data,
        };
        o.as_ref().unwrap_or(&self.delay)
    }

    /// The common delay if every channel uses the same fixed delay.
    pub fn uniform_fixed_delay(&self) -> Option<SimTime> {
        let mut value = None;
        for ch in Channel::ALL {
            match self.model_for(ch) {
                DelayModel::Fixed { value: v } if value.is_none() || value == Some(*v) => value = Some(*v),
                _ => return None,
            }
        }
        value
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversaryBehavior {
    /// Sends two different blocks per round it leads and votes for both.
    EquivocatingProposer,
    /// Sends its batches only to the next leader and refuses to serve them.
    SelectiveBatchSender,
    Silent,
    /// Follows the protocol but never sends QC-, CC- or TC-votes.
    VoteWithholder,
    /// Re-sends old messages it sent or received.
    StaleVoteReplayer,
}

impl AdversaryBehavior {
    pub const ALL: [AdversaryBehavior; 5] = [
        AdversaryBehavior::EquivocatingProposer,
        AdversaryBehavior::SelectiveBatchSender,
        AdversaryBehavior::Silent,
        AdversaryBehavior::VoteWithholder,
        AdversaryBehavior::StaleVoteReplayer,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Fault {
    Crash {
        replica: u32,
        at: SimTime,
    },
    Byzantine {
        replica: u32,
        behavior: AdversaryBehavior,
        #[serde(default)]
        at: SimTime,
    },
    /// Drops a fraction of the egress messages of `replicas` in a window.
    Drop {
        replicas: Vec<u32>,
        rate: f64,
        #[serde(default)]
        from: SimTime,
        #[serde(default)]
        until: Option<SimTime>,
    },
    /// Drops messages on specific links and channels in a window.
    LinkDrop {
        senders: Vec<u32>,
        receivers: Vec<u32>,
        #[serde(default)]
        channels: Option<Vec<Channel>>,
        rate: f64,
        #[serde(default)]
        from: SimTime,
        #[serde(default)]
        until: Option<SimTime>,
    },
    Partition {
        groups: Vec<Vec<u32>>,
        from: SimTime,
        until: SimTime,
    },
    ClockSkew {
        replica: u32,
        factor: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadConfig {
    /// Ticks between submissions at each submitting replica.
    pub interval: SimTime,
    #[serde(default = "one")]
    pub txs_per_submit: usize,
    #[serde(default = "default_tx_size")]
    pub tx_size: usize,
    /// Replicas receiving client transactions; all replicas if absent.
    #[serde(default)]
    pub submitters: Option<Vec<u32>>,
    #[serde(default)]
    pub start: SimTime,
    #[serde(default)]
    pub stop: Option<SimTime>,
}

fn one() -> usize {
    1
}

fn default_tx_size() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Horizon {
    /// Simulated time limit.
    pub time: SimTime,
    /// Stop early once every honest replica reached this round.
    #[serde(default)]
    pub rounds: Option<Round>,
}

fn default_slack() -> u64 {
    10
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checks {
    /// Totality and validity at the end of the run.
    #[serde(default = "default_true")]
    pub liveness: bool,
    /// Deadline slack for eventual properties, in multiples of Δ.
    #[serde(default = "default_slack")]
    pub liveness_slack: u64,
    /// Per-round commit deadline of `(5 + ε)Δ` after first entry, for rounds
    /// with an honest leader entered after GST.
    #[serde(default)]
    pub commit_bound: bool,
}

impl Default for Checks {
    fn default() -> Self {
        Checks { liveness: true, liveness_slack: default_slack(), commit_bound: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Default seed count for campaigns.
    #[serde(default)]
    pub seeds: Option<u64>,
    #[serde(default)]
    pub signature_scheme: SchemeKind,
    pub protocol: ProtocolConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub faults: Vec<Fault>,
    pub load: LoadConfig,
    pub horizon: Horizon,
    #[serde(default)]
    pub checks: Checks,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid protocol configuration: {0}")]
    Protocol(#[from] ConfigError),
    #[error("fault plan corrupts {count} replicas but f = {f}")]
    FaultBudget { count: usize, f: usize },
    #[error("replica {0} does not exist")]
    UnknownReplica(u32),
    #[error("{channel:?} delay model allows {max} ticks, above delta = {delta}")]
    DelayAboveDelta { channel: Channel, max: SimTime, delta: SimTime },
    #[error("delays must be at least 1 tick")]
    ZeroDelay,
    #[error("region matrix must be square with one row per region used")]
    RegionMatrix,
    #[error("rate {0} must lie in [0, 1]")]
    Rate(f64),
    #[error("uniform delay needs lo <= hi")]
    UniformBounds,
    #[error("clock skew factor must be positive")]
    Skew,
    #[error("load interval must be positive")]
    LoadInterval,
    #[error("horizon time must be positive")]
    Horizon,
    #[error("seed {0} does not fit in a signed 64-bit TOML integer")]
    Seed(u64),
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let sc: ScenarioConfig = toml::from_str(text)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    /// Panics if the seed exceeds `i64::MAX`; `validate` rejects such seeds.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    fn check_replica(&self, r: u32) -> Result<(), ScenarioError> {
        if (r as usize) < self.protocol.n {
            Ok(())
        } else {
            Err(ScenarioError::UnknownReplica(r))
        }
    }

    fn check_rate(rate: f64) -> Result<(), ScenarioError> {
        if (0.0..=1.0).contains(&rate) {
            Ok(())
        } else {
            Err(ScenarioError::Rate(rate))
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.protocol.validate()?;
        let delta = self.protocol.delta;
        for ch in Channel::ALL {
            let model = self.network.model_for(ch);
            if model.max_delay() > delta {
                return Err(ScenarioError::DelayAboveDelta { channel: ch, max: model.max_delay(), delta });
            }
            if model.min_delay() == 0 {
                return Err(ScenarioError::ZeroDelay);
            }
            match model {
                DelayModel::Uniform { lo, hi } if lo > hi => return Err(ScenarioError::UniformBounds),
                DelayModel::Regions { regions, matrix, .. } => {
                    if regions.len() != self.protocol.n
                        || matrix.iter().any(|row| row.len() != matrix.len())
                        || regions.iter().any(|r| *r >= matrix.len())
                    {
                        return Err(ScenarioError::RegionMatrix);
                    }
                }
                _ => {}
            }
        }
        if let Some(pre) = &self.network.pre_gst {
            Self::check_rate(pre.drop_rate)?;
            if pre.max_delay == 0 {
                return Err(ScenarioError::ZeroDelay);
            }
        }
        let mut corrupted = BTreeSet::new();
        for fault in &self.faults {
            match fault {
                Fault::Crash { replica, .. } | Fault::Byzantine { replica, .. } => {
                    self.check_replica(*replica)?;
                    corrupted.insert(*replica);
                }
                Fault::Drop { replicas, rate, .. } => {
                    Self::check_rate(*rate)?;
                    for r in replicas {
                        self.check_replica(*r)?;
                    }
                }
                Fault::LinkDrop { senders, receivers, rate, .. } => {
                    Self::check_rate(*rate)?;
                    for r in senders.iter().chain(receivers) {
                        self.check_replica(*r)?;
                    }
                }
                Fault::Partition { groups, .. } => {
                    for r in groups.iter().flatten() {
                        self.check_replica(*r)?;
                    }
                }
                Fault::ClockSkew { replica, factor } => {
                    self.check_replica(*replica)?;
                    if !(*factor > 0.0) {
                        return Err(ScenarioError::Skew);
                    }
                }
            }
        }
        if corrupted.len() > self.protocol.f {
            return Err(ScenarioError::FaultBudget { count: corrupted.len(), f: self.protocol.f });
        }
        if let Some(subs) = &self.load.submitters {
            for r in subs {
                self.check_replica(*r)?;
            }
        }
        if self.load.interval == 0 {
            return Err(ScenarioError::LoadInterval);
        }
        if self.horizon.time == 0 {
            return Err(ScenarioError::Horizon);
        }
        if i64::try_from(self.seed).is_err() {
            return Err(ScenarioError::Seed(self.seed));
        }
        Ok(())
    }

    /// Replicas that are corrupted or crash at any point.
    pub fn faulty_replicas(&self) -> BTreeSet<ReplicaId> {
        self.faults
            .iter()
            .filter_map(|f| match f {
                Fault::Crash { replica, .. } | Fault::Byzantine { replica, .. } => Some(ReplicaId(*replica)),
                _ => None,
            })
            .collect()
    }

    /// A small fault-free scenario with fixed delays.
    pub fn fault_free(f: usize, variant: Variant) -> Self {
        let protocol = ProtocolConfig::new(f, variant);
        let delta = protocol.delta;
        ScenarioConfig {
            name: format!("fault-free-n{}", 3 * f + 1),
            seed: 1,
            seeds: None,
            signature_scheme: SchemeKind::Test,
            network: NetworkConfig::fixed(delta),
            faults: Vec::new(),
            load: LoadConfig {
                interval: 250,
                txs_per_submit: 1,
                tx_size: default_tx_size(),
                submitters: None,
                start: 0,
                stop: None,
            },
            horizon: Horizon { time: 100 * delta, rounds: None },
            checks: Checks::default(),
            protocol,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.protocol.variant = variant;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_configuration() {
        let mut sc = ScenarioConfig::fault_free(1, Variant::BabyRaptr);
        sc.faults.push(Fault::Drop { replicas: vec![1], rate: 0.01, from: 10, until: Some(20) });
        sc.faults.push(Fault::Byzantine { replica: 3, behavior: AdversaryBehavior::Silent, at: 0 });
        sc.network.channels.data = Some(DelayModel::Uniform { lo: 10, hi: 900 });
        let text = sc.to_toml();
        let back = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(back, sc);
        assert_eq!(ScenarioConfig::from_toml(&back.to_toml()).unwrap(), back);
    }

    #[test]
    fn rejects_wrong_replica_count() {
        let mut sc = ScenarioConfig::fault_free(1, Variant::Raptr);
        sc.protocol.n = 5;
        let err = sc.validate().unwrap_err().to_string();
        assert!(err.contains("n must equal 3f + 1"), "{err}");
    }

    #[test]
    fn rejects_low_availability_requirement() {
        let mut sc = ScenarioConfig::fault_free(1, Variant::Raptr);
        sc.protocol.availability = Some(1);
        let err = sc.validate().unwrap_err().to_string();
        assert!(err.contains("below f + 1"), "{err}");
    }

    #[test]
    fn rejects_excess_faults() {
        let mut sc = ScenarioConfig::fault_free(1, Variant::Raptr);
        sc.faults.push(Fault::Crash { replica: 0, at: 0 });
        sc.faults.push(Fault::Byzantine { replica: 1, behavior: AdversaryBehavior::Silent, at: 0 });
        assert!(matches!(sc.validate(), Err(ScenarioError::FaultBudget { count: 2, f: 1 })));
    }

    #[test]
    fn rejects_delay_above_delta() {
        let mut sc = ScenarioConfig::fault_free(1, Variant::Raptr);
        sc.network.delay = DelayModel::Uniform { lo: 1, hi: 2000 };
        assert!(matches!(sc.validate(), Err(ScenarioError::DelayAboveDelta { .. })));
    }
}
