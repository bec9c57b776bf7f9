//! Scenario configuration (TOML) and its resolution into concrete flows,
//! memberships and initial placement.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::medium::{ChannelModel, DEFAULT_QUEUE_CAPACITY};
use crate::mobility::{Area, Point};
use crate::protocol::{ProtocolParams, Variant};
use crate::recovery::RecoveryParams;
use crate::security::SecurityParams;
use crate::wire::{GroupId, NodeId, DEFAULT_PAYLOAD_BYTES};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid `{key}`: {msg}")]
    Invalid { key: String, msg: String },
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaConfig {
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub source: NodeId,
    #[serde(default)]
    pub group: GroupId,
    pub rate: Option<f64>,
    pub b_req: Option<u64>,
    pub max_delay: Option<f64>,
    /// First packet time; defaults to `traffic_start` without jitter.
    pub start: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MembershipConfig {
    pub group: GroupId,
    pub nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkAction {
    Down,
    Up,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEventConfig {
    pub at: f64,
    pub a: NodeId,
    pub b: NodeId,
    pub action: LinkAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub seed: u64,
    pub nodes: usize,
    pub area: AreaConfig,
    pub range: f64,
    pub capacity: f64,
    pub duration: f64,
    pub payload: u32,
    pub min_speed: f64,
    pub max_speed: f64,
    pub pause: f64,
    pub variant: Variant,
    pub channel_model: ChannelModel,
    pub queue_capacity: usize,
    /// Number of generated sources; ignored when `flows` is given.
    pub sources: usize,
    pub groups: u32,
    /// Generated non-source receivers per group; ignored when `members` is given.
    pub receivers_per_group: usize,
    /// CBR packets per second per flow.
    pub rate: f64,
    /// Defaults to `rate × payload × 8`.
    pub b_req: Option<u64>,
    pub max_delay: Option<f64>,
    pub traffic_start: f64,
    /// Sources stop generating this many seconds before the end so packets
    /// in flight can drain.
    pub drain: f64,
    /// Sources begin route discovery this many seconds before their first
    /// packet (clamped at time zero).
    pub discovery_lead: f64,
    /// Fixed node positions. Nodes do not move when given.
    pub positions: Option<Vec<[f64; 2]>>,
    pub flows: Option<Vec<FlowConfig>>,
    pub members: Option<Vec<MembershipConfig>>,
    pub link_events: Vec<LinkEventConfig>,
    pub protocol: ProtocolParams,
    pub recovery: RecoveryParams,
    pub security: SecurityParams,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 1,
            nodes: 50,
            area: AreaConfig {
                width: 1000.0,
                height: 1000.0,
            },
            range: 250.0,
            capacity: 2e6,
            duration: 300.0,
            payload: DEFAULT_PAYLOAD_BYTES,
            min_speed: 1.0,
            max_speed: 20.0,
            pause: 0.0,
            variant: Variant::Proposed,
            channel_model: ChannelModel::Csma,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            sources: 5,
            groups: 1,
            receivers_per_group: 10,
            rate: 4.0,
            b_req: None,
            max_delay: None,
            traffic_start: 1.0,
            drain: 1.0,
            discovery_lead: 1.0,
            positions: None,
            flows: None,
            members: None,
            link_events: Vec::new(),
            protocol: ProtocolParams::default(),
            recovery: RecoveryParams::default(),
            security: SecurityParams::default(),
        }
    }
}

/// A flow after defaults are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub source: NodeId,
    pub group: GroupId,
    pub rate: f64,
    pub b_req: u64,
    pub max_delay: f64,
    pub start: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub initial: Vec<Point>,
    pub mobile: bool,
    pub flows: Vec<FlowSpec>,
    pub members: BTreeMap<GroupId, BTreeSet<NodeId>>,
}

impl Resolved {
    /// Members of the flow's group other than its source.
    pub fn receivers(&self, flow: &FlowSpec) -> usize {
        self.members
            .get(&flow.group)
            .map_or(0, |m| m.iter().filter(|&&n| n != flow.source).count())
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn area(&self) -> Area {
        Area {
            width: self.area.width,
            height: self.area.height,
        }
    }

    pub fn default_b_req(&self, rate: f64) -> u64 {
        (rate * f64::from(self.payload) * 8.0).round() as u64
    }

    /// Protocol parameters with scenario-level values filled in.
    pub fn protocol_params(&self) -> ProtocolParams {
        ProtocolParams {
            capacity: self.capacity,
            variant: self.variant,
            ..self.protocol.clone()
        }
    }

    pub fn recovery_enabled(&self) -> bool {
        self.recovery.enabled && self.variant == Variant::Proposed
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.nodes;
        if n == 0 {
            return Err(invalid("nodes", "must be at least 1"));
        }
        let pos = |k: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(k, format!("must be positive, got {v}")))
            }
        };
        pos("area.width", self.area.width)?;
        pos("area.height", self.area.height)?;
        pos("range", self.range)?;
        pos("capacity", self.capacity)?;
        pos("duration", self.duration)?;
        pos("rate", self.rate)?;
        pos("min_speed", self.min_speed)?;
        if self.payload == 0 {
            return Err(invalid("payload", "must be at least 1 byte"));
        }
        if !(self.max_speed.is_finite() && self.max_speed >= self.min_speed) {
            return Err(invalid("max_speed", "must be at least min_speed"));
        }
        if !(self.pause.is_finite() && self.pause >= 0.0) {
            return Err(invalid("pause", "must be non-negative"));
        }
        if !(self.traffic_start.is_finite() && self.traffic_start >= 0.0) {
            return Err(invalid("traffic_start", "must be non-negative"));
        }
        if !(self.drain.is_finite() && self.drain >= 0.0 && self.drain < self.duration) {
            return Err(invalid("drain", "must be non-negative and less than duration"));
        }
        if !(self.discovery_lead.is_finite() && self.discovery_lead >= 0.0) {
            return Err(invalid("discovery_lead", "must be non-negative"));
        }
        if self.queue_capacity == 0 {
            return Err(invalid("queue_capacity", "must be at least 1"));
        }
        if let Some(d) = self.max_delay {
            pos("max_delay", d)?;
        }
        let node_ok = |k: &str, id: NodeId| {
            if (id as usize) < n {
                Ok(())
            } else {
                Err(invalid(k, format!("node {id} out of range (nodes = {n})")))
            }
        };
        if let Some(ps) = &self.positions {
            if ps.len() != n {
                return Err(invalid("positions", format!("expected {n} entries, got {}", ps.len())));
            }
            for p in ps {
                if !self.area().contains(Point::new(p[0], p[1])) {
                    return Err(invalid("positions", format!("({}, {}) outside area", p[0], p[1])));
                }
            }
        }
        match &self.flows {
            Some(flows) => {
                if flows.is_empty() {
                    return Err(invalid("flows", "must not be empty"));
                }
                let mut seen = BTreeSet::new();
                for f in flows {
                    node_ok("flows.source", f.source)?;
                    if !seen.insert((f.source, f.group)) {
                        return Err(invalid("flows", format!("duplicate flow ({}, {})", f.source, f.group)));
                    }
                    if let Some(r) = f.rate {
                        pos("flows.rate", r)?;
                    }
                    if let Some(d) = f.max_delay {
                        pos("flows.max_delay", d)?;
                    }
                    if let Some(s) = f.start {
                        if !(s.is_finite() && s >= 0.0) {
                            return Err(invalid("flows.start", "must be non-negative"));
                        }
                    }
                }
            }
            None => {
                if self.sources == 0 || self.sources > n {
                    return Err(invalid("sources", format!("must be in 1..={n}")));
                }
                if self.groups == 0 {
                    return Err(invalid("groups", "must be at least 1"));
                }
            }
        }
        if let Some(ms) = &self.members {
            for m in ms {
                for &id in &m.nodes {
                    node_ok("members.nodes", id)?;
                }
            }
        } else if self.receivers_per_group > n {
            return Err(invalid("receivers_per_group", format!("must be at most {n}")));
        }
        for e in &self.link_events {
            node_ok("link_events.a", e.a)?;
            node_ok("link_events.b", e.b)?;
            if e.a == e.b {
                return Err(invalid("link_events", "a and b must differ"));
            }
            if !(e.at.is_finite() && e.at >= 0.0) {
                return Err(invalid("link_events.at", "must be non-negative"));
            }
        }
        self.protocol.validate().map_err(|m| invalid("protocol", m))?;
        self.recovery.validate().map_err(|m| invalid("recovery", m))?;
        self.security.validate(n).map_err(|m| invalid("security", m))?;
        Ok(())
    }

    /// Draws placement, sources and receivers. Consumes randomness in a
    /// fixed order so a seed fully determines the result.
    pub fn resolve<R: Rng + ?Sized>(&self, rng: &mut R) -> Resolved {
        let area = self.area();
        let (initial, mobile) = match &self.positions {
            Some(ps) => (ps.iter().map(|p| Point::new(p[0], p[1])).collect(), false),
            None => ((0..self.nodes).map(|_| area.random_point(rng)).collect(), true),
        };

        let all: Vec<NodeId> = (0..self.nodes as NodeId).collect();
        let flows: Vec<FlowSpec> = match &self.flows {
            Some(fs) => fs
                .iter()
                .map(|f| {
                    let rate = f.rate.unwrap_or(self.rate);
                    FlowSpec {
                        source: f.source,
                        group: f.group,
                        rate,
                        b_req: f.b_req.or(self.b_req).unwrap_or_else(|| self.default_b_req(rate)),
                        max_delay: f.max_delay.or(self.max_delay).unwrap_or(f64::INFINITY),
                        start: f.start.unwrap_or(self.traffic_start),
                    }
                })
                .collect(),
            None => {
                let mut srcs: Vec<NodeId> = all.choose_multiple(rng, self.sources).copied().collect();
                srcs.sort_unstable();
                srcs.iter()
                    .enumerate()
                    .map(|(i, &s)| FlowSpec {
                        source: s,
                        group: i as GroupId % self.groups,
                        rate: self.rate,
                        b_req: self.b_req.unwrap_or_else(|| self.default_b_req(self.rate)),
                        max_delay: self.max_delay.unwrap_or(f64::INFINITY),
                        start: self.traffic_start + rng.gen_range(0.0..1.0 / self.rate),
                    })
                    .collect()
            }
        };

        let sources: BTreeSet<NodeId> = flows.iter().map(|f| f.source).collect();
        let groups: BTreeSet<GroupId> = flows.iter().map(|f| f.group).collect();
        let mut members: BTreeMap<GroupId, BTreeSet<NodeId>> = BTreeMap::new();
        match &self.members {
            Some(ms) => {
                for m in ms {
                    members.entry(m.group).or_default().extend(m.nodes.iter().copied());
                }
            }
            None => {
                let others: Vec<NodeId> = all.iter().copied().filter(|n| !sources.contains(n)).collect();
                for &g in &groups {
                    let k = self.receivers_per_group.min(others.len());
                    let set = members.entry(g).or_default();
                    set.extend(others.choose_multiple(rng, k).copied());
                    // every source also receives every group
                    set.extend(sources.iter().copied());
                }
            }
        }
        Resolved {
            initial,
            mobile,
            flows,
            members,
        }
    }

    /// Five static nodes 200 m apart, node 0 sending to node 4 over an
    /// ideal channel.
    pub fn line5() -> Self {
        Scenario {
            nodes: 5,
            duration: 30.0,
            channel_model: ChannelModel::Ideal,
            variant: Variant::Proposed,
            positions: Some((0..5).map(|i| [200.0 * f64::from(i), 500.0]).collect()),
            flows: Some(vec![FlowConfig {
                source: 0,
                group: 0,
                rate: None,
                b_req: None,
                max_delay: None,
                start: None,
            }]),
            members: Some(vec![MembershipConfig {
                group: 0,
                nodes: vec![4],
            }]),
            ..Scenario::default()
        }
    }
}
