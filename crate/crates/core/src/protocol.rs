//! Per-node multicast routing state machine.
//!
//! One [`NodeState`] per node. Three variants share the code:
//!
//! * `odmrp`: plain periodic source floods, no Hello, no admission control.
//! * `cqmp`: adds RREQ consolidation at sources.
//! * `proposed`: consolidation plus Hello-based neighborhood bandwidth
//!   tracking, per-hop admission control and bandwidth reservation.
//!
//! Route entries move through explored → registered → reserved and never
//! back. Each status has its own lifetime; an entry that outlives it is
//! evicted and any bandwidth it held is released.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::recovery::RecoveryState;
use crate::security::SecurityState;
use crate::wire::{DataKey, DataPacket, GroupId, Hello, NodeId, Reply, ReplyEntry, Rreq, SourceRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Odmrp,
    Cqmp,
    #[default]
    Proposed,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Odmrp, Variant::Cqmp, Variant::Proposed];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Odmrp => "odmrp",
            Variant::Cqmp => "cqmp",
            Variant::Proposed => "proposed",
        }
    }

    pub fn consolidates(self) -> bool {
        self != Variant::Odmrp
    }

    /// Hello, admission control and reservation.
    pub fn qos(self) -> bool {
        self == Variant::Proposed
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "odmrp" => Ok(Variant::Odmrp),
            "cqmp" => Ok(Variant::Cqmp),
            "proposed" => Ok(Variant::Proposed),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolParams {
    pub hello_interval: f64,
    pub rreq_interval: f64,
    /// Consolidation window: a source piggybacks its own rows onto a passing
    /// RREQ when its own emission is due within this many seconds.
    pub time_interval: f64,
    pub t_explored: f64,
    pub t_registered: f64,
    pub t_reserved: f64,
    pub fg_timeout: f64,
    /// Fraction of raw capacity usable by reservations.
    pub mac_efficiency: f64,
    /// Number of same-flow transmitters a single neighborhood must absorb.
    /// Admission requires `contention_factor * b_req` of headroom.
    pub contention_factor: u32,
    /// Nominal per-hop delay used against a row's `max_delay`.
    pub per_hop_delay: f64,
    /// Send an extra Hello as soon as own reservations grow or the
    /// advertised headroom shrinks, instead of waiting for the next period.
    pub triggered_hello: bool,
    /// Raise the admission margin to the number of reservations one Reply
    /// pass can add around a node: chain so far, this node, and every hop
    /// still upstream including the source.
    pub path_aware_admission: bool,
    #[serde(skip)]
    pub capacity: f64,
    #[serde(skip)]
    pub variant: Variant,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            hello_interval: 3.0,
            rreq_interval: 3.0,
            time_interval: 1.5,
            t_explored: 3.0,
            t_registered: 3.0,
            t_reserved: 6.0,
            fg_timeout: 9.0,
            mac_efficiency: 0.8,
            contention_factor: 3,
            // data frame airtime at 2 Mbit/s plus 1 ms queueing allowance
            per_hop_delay: 2.24e-3 + 1e-3,
            triggered_hello: true,
            path_aware_admission: true,
            capacity: 2e6,
            variant: Variant::Proposed,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("hello_interval", self.hello_interval),
            ("rreq_interval", self.rreq_interval),
            ("t_explored", self.t_explored),
            ("t_registered", self.t_registered),
            ("t_reserved", self.t_reserved),
            ("fg_timeout", self.fg_timeout),
            ("mac_efficiency", self.mac_efficiency),
            ("per_hop_delay", self.per_hop_delay),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("protocol.{k} must be positive, got {v}"));
            }
        }
        // zero turns consolidation off
        if !(self.time_interval.is_finite() && self.time_interval >= 0.0) {
            return Err(format!("protocol.time_interval must be non-negative, got {}", self.time_interval));
        }
        if self.time_interval >= self.rreq_interval {
            return Err("protocol.time_interval must be less than protocol.rreq_interval".into());
        }
        if self.mac_efficiency > 1.0 {
            return Err("protocol.mac_efficiency must be at most 1".into());
        }
        if self.contention_factor == 0 {
            return Err("protocol.contention_factor must be at least 1".into());
        }
        Ok(())
    }

    pub fn usable_capacity(&self) -> f64 {
        self.mac_efficiency * self.capacity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborEntry {
    pub neighbor: NodeId,
    pub b_available: f64,
    pub consumed_rate: u64,
    pub co_neighbor: u32,
    pub last_heard: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RouteStatus {
    Explored,
    Registered,
    Reserved,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteEntry {
    /// Unique per node for the lifetime of the run.
    pub id: u64,
    pub source: NodeId,
    pub group: GroupId,
    pub seq: u32,
    pub upstream: NodeId,
    pub status: RouteStatus,
    pub status_since: SimTime,
    pub b_req: u64,
    /// Bandwidth held by this entry; zero unless registered under `proposed`.
    pub reserved_rate: u64,
    /// Transmissions from the source to this node when explored.
    pub hops: u32,
}

impl RouteEntry {
    pub fn expires_at(&self, p: &ProtocolParams) -> SimTime {
        let ttl = match self.status {
            RouteStatus::Explored => p.t_explored,
            RouteStatus::Registered => p.t_registered,
            RouteStatus::Reserved => p.t_reserved,
        };
        self.status_since.plus(ttl)
    }

    pub fn is_live(&self, p: &ProtocolParams, now: SimTime) -> bool {
        now < self.expires_at(p)
    }

    pub fn forwards(&self) -> bool {
        self.status >= RouteStatus::Registered
    }
}

/// A flow this node originates.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnFlow {
    pub group: GroupId,
    pub b_req: u64,
    pub max_delay: f64,
    pub next_flow_seq: u32,
}

/// Source-side state once a Reply has reached the source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceReservation {
    pub expires_at: SimTime,
    pub reserved_rate: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admit,
    RejectSelf,
    RejectNeighbor(NodeId),
}

/// Invariant checks recorded as the node runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Audit {
    pub status_regressions: u64,
    pub duplicate_row_rebroadcasts: u64,
    pub duplicate_data_rebroadcasts: u64,
    pub conservation_violations: u64,
    relayed_rows: HashSet<(NodeId, GroupId, u32)>,
    relayed_data: HashSet<DataKey>,
}

impl Audit {
    pub fn violations(&self) -> u64 {
        self.status_regressions
            + self.duplicate_row_rebroadcasts
            + self.duplicate_data_rebroadcasts
            + self.conservation_violations
    }
}

#[derive(Debug, Default)]
pub struct RreqOutcome {
    pub rebroadcast: Option<Rreq>,
    pub reply: Option<Reply>,
    /// Own INT moved because rows were piggybacked.
    pub consolidated: bool,
    pub rejected_rows: usize,
}

#[derive(Debug, Default)]
pub struct ReplyOutcome {
    pub relay: Option<Reply>,
    /// Groups for which this node (as source) now has a route.
    pub established: Vec<GroupId>,
    pub rejected_entries: usize,
}

#[derive(Debug, Default, PartialEq)]
pub struct DataOutcome {
    pub duplicate: bool,
    pub deliver: bool,
    pub rebroadcast: bool,
}

#[derive(Debug)]
pub struct NodeState {
    pub id: NodeId,
    pub neighbors: BTreeMap<NodeId, NeighborEntry>,
    pub routes: BTreeMap<(NodeId, GroupId), RouteEntry>,
    pub fg: BTreeMap<GroupId, SimTime>,
    pub memberships: BTreeSet<GroupId>,
    pub own_flows: Vec<OwnFlow>,
    pub source_res: BTreeMap<GroupId, SourceReservation>,
    pub rreq_seq: u32,
    /// Next scheduled own RREQ emission.
    pub next_int: Option<SimTime>,
    /// Sum of bandwidth held by this node, bits/s.
    pub consumed: u64,
    seen_rows: HashSet<(NodeId, GroupId, u32)>,
    replied_rows: HashSet<(NodeId, GroupId, u32)>,
    relayed_reply_rows: HashSet<(NodeId, GroupId, u32)>,
    seen_data: HashSet<DataKey>,
    next_entry_id: u64,
    /// (consumed, b_available) carried by the last Hello sent.
    advertised: Option<(u64, f64)>,
    /// A known neighbor reported a larger reservation since that Hello.
    neighbor_grew: bool,
    pub recovery: RecoveryState,
    pub security: SecurityState,
    pub audit: Audit,
}

impl NodeState {
    pub fn new(id: NodeId) -> Self {
        NodeState {
            id,
            neighbors: BTreeMap::new(),
            routes: BTreeMap::new(),
            fg: BTreeMap::new(),
            memberships: BTreeSet::new(),
            own_flows: Vec::new(),
            source_res: BTreeMap::new(),
            rreq_seq: 0,
            next_int: None,
            consumed: 0,
            advertised: None,
            neighbor_grew: false,
            seen_rows: HashSet::new(),
            replied_rows: HashSet::new(),
            relayed_reply_rows: HashSet::new(),
            seen_data: HashSet::new(),
            next_entry_id: 0,
            recovery: RecoveryState::default(),
            security: SecurityState::default(),
            audit: Audit::default(),
        }
    }

    pub fn is_source(&self) -> bool {
        !self.own_flows.is_empty()
    }

    pub fn is_member(&self, group: GroupId) -> bool {
        self.memberships.contains(&group)
    }

    pub fn is_forwarder(&self, group: GroupId, now: SimTime) -> bool {
        self.fg.get(&group).is_some_and(|&exp| now < exp)
    }

    fn neighbor_live(&self, e: &NeighborEntry, p: &ProtocolParams, now: SimTime) -> bool {
        now.secs() - e.last_heard.secs() <= 2.0 * p.hello_interval
    }

    pub fn live_neighbors<'a>(
        &'a self,
        p: &'a ProtocolParams,
        now: SimTime,
    ) -> impl Iterator<Item = &'a NeighborEntry> + 'a {
        self.neighbors.values().filter(move |e| self.neighbor_live(e, p, now))
    }

    // ---- neighborhood --------------------------------------------------

    /// `max(0, αC − own consumed − Σ live neighbors' consumed)`.
    pub fn available_bandwidth(&self, p: &ProtocolParams, now: SimTime) -> f64 {
        let neigh: u64 = self.live_neighbors(p, now).map(|e| e.consumed_rate).sum();
        (p.usable_capacity() - self.consumed as f64 - neigh as f64).max(0.0)
    }

    pub fn emit_hello(&mut self, p: &ProtocolParams, now: SimTime) -> Hello {
        self.sweep_timers(p, now);
        let h = Hello {
            origin: self.id,
            b_available: self.available_bandwidth(p, now),
            consumed_rate: self.consumed,
        };
        self.advertised = Some((h.consumed_rate, h.b_available));
        self.neighbor_grew = false;
        h
    }

    /// An out-of-period Hello announcing new reservations: this node's own,
    /// or a known neighbor's that shrank the headroom advertised here.
    /// Releases and topology changes wait for the periodic Hello.
    pub fn triggered_hello(&mut self, p: &ProtocolParams, now: SimTime) -> Option<Hello> {
        if !(p.triggered_hello && p.variant.qos()) {
            return None;
        }
        self.sweep_timers(p, now);
        let (ac, ab) = self.advertised.unwrap_or((0, p.usable_capacity()));
        let own = self.consumed > ac;
        let around = self.neighbor_grew && self.available_bandwidth(p, now) < ab;
        if !(own || around) {
            return None;
        }
        Some(self.emit_hello(p, now))
    }

    pub fn process_hello(&mut self, p: &ProtocolParams, hello: &Hello, now: SimTime) {
        self.sweep_timers(p, now);
        if let Some(old) = self.neighbors.get(&hello.origin) {
            self.neighbor_grew |= hello.consumed_rate > old.consumed_rate;
        }
        let e = self.neighbors.entry(hello.origin).or_insert(NeighborEntry {
            neighbor: hello.origin,
            b_available: 0.0,
            consumed_rate: 0,
            co_neighbor: 0,
            last_heard: now,
        });
        e.b_available = hello.b_available;
        e.consumed_rate = hello.consumed_rate;
        e.last_heard = now;
    }

    /// Admission on self and every live neighbor.
    pub fn admission_check(&self, p: &ProtocolParams, b_req: u64, now: SimTime) -> Admission {
        self.admission_check_pass(p, b_req, 0, now)
    }

    /// Admission when `pass` reservations of the same Reply pass may land
    /// in one neighborhood before any Hello reports them.
    pub fn admission_check_pass(&self, p: &ProtocolParams, b_req: u64, pass: u32, now: SimTime) -> Admission {
        let factor = if p.path_aware_admission {
            p.contention_factor.max(pass)
        } else {
            p.contention_factor
        };
        let need = b_req as f64 * f64::from(factor);
        if self.available_bandwidth(p, now) < need {
            return Admission::RejectSelf;
        }
        for e in self.live_neighbors(p, now) {
            if e.b_available < need {
                return Admission::RejectNeighbor(e.neighbor);
            }
        }
        Admission::Admit
    }

    fn relay_neighbor_list(&self, p: &ProtocolParams, now: SimTime) -> Vec<(NodeId, u32)> {
        self.live_neighbors(p, now)
            .map(|e| (e.neighbor, e.co_neighbor))
            .collect()
    }

    // ---- route discovery ---------------------------------------------

    fn own_rows(&mut self) -> Vec<SourceRow> {
        self.rreq_seq += 1;
        let seq = self.rreq_seq;
        let rows: Vec<SourceRow> = self
            .own_flows
            .iter()
            .map(|f| SourceRow {
                source: self.id,
                group: f.group,
                seq,
                b_req: f.b_req,
                max_delay: f.max_delay,
                hop_count: 0,
            })
            .collect();
        for r in &rows {
            self.seen_rows.insert(r.key());
        }
        rows
    }

    /// Fires when the node's INT expires.
    pub fn originate_rreq(&mut self, p: &ProtocolParams, now: SimTime) -> Option<Rreq> {
        if !self.is_source() {
            return None;
        }
        self.sweep_timers(p, now);
        let rows = self.own_rows();
        self.next_int = Some(now.plus(p.rreq_interval));
        Some(Rreq {
            rows,
            relay: self.id,
            relay_neighbors: self.relay_neighbor_list(p, now),
        })
    }

    /// Appends own rows when the node's own emission is due within the
    /// consolidation window. Returns true if rows were added.
    pub fn maybe_consolidate(&mut self, p: &ProtocolParams, now: SimTime, rreq: &mut Rreq) -> bool {
        if !p.variant.consolidates() || !self.is_source() {
            return false;
        }
        let Some(due) = self.next_int else {
            return false;
        };
        if due.secs() - now.secs() > p.time_interval {
            return false;
        }
        let rows = self.own_rows();
        rreq.rows.extend(rows);
        self.next_int = Some(now.plus(p.rreq_interval));
        true
    }

    fn holds_route(&self, p: &ProtocolParams, key: (NodeId, GroupId), now: SimTime) -> bool {
        self.routes
            .get(&key)
            .is_some_and(|e| e.forwards() && e.is_live(p, now))
    }

    pub fn process_rreq(&mut self, p: &ProtocolParams, rreq: &Rreq, now: SimTime) -> RreqOutcome {
        self.sweep_timers(p, now);
        let mut out = RreqOutcome::default();

        if let Some(e) = self.neighbors.get(&rreq.relay) {
            if self.neighbor_live(e, p, now) {
                let mine: BTreeSet<NodeId> = self.live_neighbors(p, now).map(|e| e.neighbor).collect();
                let co = rreq
                    .relay_neighbors
                    .iter()
                    .filter(|(n, _)| mine.contains(n))
                    .count() as u32;
                self.neighbors.get_mut(&rreq.relay).expect("present").co_neighbor = co;
            }
        }

        let mut survivors = Vec::new();
        for row in &rreq.rows {
            if row.source == self.id || !self.seen_rows.insert(row.key()) {
                continue;
            }
            let hops = f64::from(row.hop_count + 1);
            if hops * p.per_hop_delay > row.max_delay {
                out.rejected_rows += 1;
                continue;
            }
            let key = (row.source, row.group);
            if p.variant.qos()
                && !self.holds_route(p, key, now)
                && self.admission_check(p, row.b_req, now) != Admission::Admit
            {
                out.rejected_rows += 1;
                continue;
            }
            self.upsert_explored(p, row, rreq.relay, now);
            survivors.push(row.clone());
        }

        if survivors.is_empty() {
            return out;
        }

        let reply_entries: Vec<ReplyEntry> = survivors
            .iter()
            .filter(|r| self.is_member(r.group) && self.replied_rows.insert(r.key()))
            .map(|r| ReplyEntry {
                source: r.source,
                group: r.group,
                seq: r.seq,
                next_node: rreq.relay,
            })
            .collect();
        if !reply_entries.is_empty() {
            out.reply = Some(Reply {
                entries: reply_entries,
                origin: self.id,
                fg_chain: vec![self.id],
            });
        }

        let mut fwd = Rreq {
            rows: survivors
                .into_iter()
                .map(|mut r| {
                    r.hop_count += 1;
                    r
                })
                .collect(),
            relay: self.id,
            relay_neighbors: self.relay_neighbor_list(p, now),
        };
        out.consolidated = self.maybe_consolidate(p, now, &mut fwd);
        for r in &fwd.rows {
            if !self.audit.relayed_rows.insert(r.key()) {
                self.audit.duplicate_row_rebroadcasts += 1;
            }
        }
        out.rebroadcast = Some(fwd);
        out
    }

    fn upsert_explored(&mut self, p: &ProtocolParams, row: &SourceRow, upstream: NodeId, now: SimTime) {
        let key = (row.source, row.group);
        if let Some(e) = self.routes.get_mut(&key) {
            if e.is_live(p, now) {
                e.seq = row.seq;
                e.upstream = upstream;
                if e.status == RouteStatus::Explored {
                    e.status_since = now;
                    e.b_req = row.b_req;
                    e.hops = row.hop_count + 1;
                }
                return;
            }
        }
        self.remove_route(key);
        let id = self.next_entry_id;
        self.next_entry_id += 1;
        self.routes.insert(
            key,
            RouteEntry {
                id,
                source: row.source,
                group: row.group,
                seq: row.seq,
                upstream,
                status: RouteStatus::Explored,
                status_since: now,
                b_req: row.b_req,
                reserved_rate: 0,
                hops: row.hop_count + 1,
            },
        );
    }

    fn remove_route(&mut self, key: (NodeId, GroupId)) {
        if let Some(e) = self.routes.remove(&key) {
            self.consumed -= e.reserved_rate;
        }
    }

    fn set_status(&mut self, key: (NodeId, GroupId), status: RouteStatus, now: SimTime) {
        let e = self.routes.get_mut(&key).expect("route present");
        if status < e.status {
            self.audit.status_regressions += 1;
        }
        e.status = status;
        e.status_since = now;
    }

    /// Receiver side: Reply for rows of a just-processed RREQ. Already
    /// produced by [`process_rreq`](Self::process_rreq); exposed for tests.
    pub fn build_reply(&self, rreq: &Rreq) -> Option<Reply> {
        let entries: Vec<ReplyEntry> = rreq
            .rows
            .iter()
            .filter(|r| r.source != self.id && self.is_member(r.group))
            .filter_map(|r| {
                self.routes.get(&(r.source, r.group)).map(|e| ReplyEntry {
                    source: r.source,
                    group: r.group,
                    seq: r.seq,
                    next_node: e.upstream,
                })
            })
            .collect();
        (!entries.is_empty()).then(|| Reply {
            entries,
            origin: self.id,
            fg_chain: vec![self.id],
        })
    }

    pub fn process_reply(&mut self, p: &ProtocolParams, reply: &Reply, now: SimTime) -> ReplyOutcome {
        self.sweep_timers(p, now);
        let mut out = ReplyOutcome::default();
        let mut relay_entries = Vec::new();
        let mut matched_flows = BTreeSet::new();

        let me = self.id;
        for entry in reply.entries.iter().filter(|e| e.next_node == me) {
            if entry.source == self.id {
                if self.accept_at_source(p, entry.group, reply.fg_chain.len() as u32 + 1, now) {
                    out.established.push(entry.group);
                    matched_flows.insert((entry.source, entry.group));
                } else {
                    out.rejected_entries += 1;
                }
                continue;
            }
            let key = (entry.source, entry.group);
            let Some(route) = self.routes.get(&key) else {
                continue; // late reply
            };
            if !route.is_live(p, now) {
                continue;
            }
            match route.status {
                RouteStatus::Explored => {
                    let b_req = route.b_req;
                    let pass = reply.fg_chain.len() as u32 + 1 + route.hops;
                    if p.variant.qos() && self.admission_check_pass(p, b_req, pass, now) != Admission::Admit {
                        out.rejected_entries += 1;
                        continue;
                    }
                    self.set_status(key, RouteStatus::Registered, now);
                    if p.variant.qos() {
                        self.routes.get_mut(&key).expect("present").reserved_rate = b_req;
                        self.consumed += b_req;
                    }
                }
                RouteStatus::Registered => {
                    self.routes.get_mut(&key).expect("present").status_since = now;
                }
                RouteStatus::Reserved => {}
            }
            self.fg.insert(entry.group, now.plus(p.fg_timeout));
            matched_flows.insert((entry.source, entry.group));
            if self.relayed_reply_rows.insert((entry.source, entry.group, entry.seq)) {
                let upstream = self.routes[&key].upstream;
                relay_entries.push(ReplyEntry {
                    next_node: upstream,
                    ..entry.clone()
                });
            }
        }

        for f in matched_flows {
            self.recovery.learn_chain(f, &reply.fg_chain, now);
        }

        if !relay_entries.is_empty() {
            let mut chain = reply.fg_chain.clone();
            if !chain.contains(&self.id) {
                chain.push(self.id);
            }
            out.relay = Some(Reply {
                entries: relay_entries,
                origin: reply.origin,
                fg_chain: chain,
            });
        }
        self.check_conservation();
        out
    }

    fn accept_at_source(&mut self, p: &ProtocolParams, group: GroupId, pass: u32, now: SimTime) -> bool {
        let Some(flow) = self.own_flows.iter().find(|f| f.group == group) else {
            return false;
        };
        let b_req = flow.b_req;
        let expires_at = now.plus(p.fg_timeout);
        if let Some(res) = self.source_res.get_mut(&group) {
            if now < res.expires_at {
                res.expires_at = expires_at;
                return true;
            }
        }
        if let Some(old) = self.source_res.remove(&group) {
            self.consumed -= old.reserved_rate;
        }
        let reserved_rate = if p.variant.qos() {
            if self.admission_check_pass(p, b_req, pass, now) != Admission::Admit {
                return false;
            }
            b_req
        } else {
            0
        };
        self.consumed += reserved_rate;
        self.source_res.insert(
            group,
            SourceReservation {
                expires_at,
                reserved_rate,
            },
        );
        true
    }

    /// Whether the source may inject a data packet for `group` now.
    pub fn may_send(&self, p: &ProtocolParams, group: GroupId, now: SimTime) -> bool {
        if !p.variant.qos() {
            return true;
        }
        self.source_res.get(&group).is_some_and(|r| now < r.expires_at)
    }

    /// Builds the next data packet of an own flow and marks it seen.
    pub fn originate_data(&mut self, group: GroupId, payload_bytes: u32, now: SimTime) -> DataPacket {
        let flow = self
            .own_flows
            .iter_mut()
            .find(|f| f.group == group)
            .expect("own flow");
        let d = DataPacket {
            source: self.id,
            group,
            flow_seq: flow.next_flow_seq,
            payload_bytes,
            sent_at: now,
        };
        flow.next_flow_seq += 1;
        self.seen_data.insert(d.key());
        d
    }

    // ---- data forwarding -----------------------------------------------

    pub fn forward_data(&mut self, p: &ProtocolParams, data: &DataPacket, now: SimTime) -> DataOutcome {
        self.sweep_timers(p, now);
        let deliver = self.is_member(data.group) && data.source != self.id;
        let key = (data.source, data.group);
        let forwarder = self.is_forwarder(data.group, now) && self.holds_route(p, key, now);
        // Copies overheard by an uninvolved node are not cached, so a relay
        // patched in later still forwards packets it heard before.
        if !deliver && !forwarder {
            return DataOutcome::default();
        }
        if !self.seen_data.insert(data.key()) {
            return DataOutcome {
                duplicate: true,
                ..DataOutcome::default()
            };
        }
        let rebroadcast = forwarder;
        if rebroadcast {
            self.set_status(key, RouteStatus::Reserved, now);
            if !self.audit.relayed_data.insert(data.key()) {
                self.audit.duplicate_data_rebroadcasts += 1;
            }
        }
        DataOutcome {
            duplicate: false,
            deliver,
            rebroadcast,
        }
    }

    /// Installs forwarding state for a recovery relay. No admission check
    /// and no reservation.
    pub fn install_patch(&mut self, p: &ProtocolParams, group: GroupId, sources: &[NodeId], upstream: NodeId, now: SimTime) {
        self.sweep_timers(p, now);
        for &s in sources {
            let key = (s, group);
            match self.routes.get(&key) {
                Some(e) if e.is_live(p, now) => {
                    if e.status == RouteStatus::Explored {
                        self.set_status(key, RouteStatus::Registered, now);
                    } else if e.status == RouteStatus::Registered {
                        self.routes.get_mut(&key).expect("present").status_since = now;
                    }
                }
                _ => {
                    self.remove_route(key);
                    let id = self.next_entry_id;
                    self.next_entry_id += 1;
                    self.routes.insert(
                        key,
                        RouteEntry {
                            id,
                            source: s,
                            group,
                            seq: 0,
                            upstream,
                            status: RouteStatus::Registered,
                            status_since: now,
                            b_req: 0,
                            reserved_rate: 0,
                            hops: 0,
                        },
                    );
                }
            }
        }
        self.fg.insert(group, now.plus(p.fg_timeout));
    }

    /// Sources with a live forwarding entry for `group`.
    pub fn forwarded_sources(&self, p: &ProtocolParams, group: GroupId, now: SimTime) -> Vec<NodeId> {
        self.routes
            .values()
            .filter(|e| e.group == group && e.forwards() && e.is_live(p, now))
            .map(|e| e.source)
            .collect()
    }

    // ---- timers --------------------------------------------------------

    /// Evicts everything past its lifetime and releases held bandwidth.
    /// Returns the number of route entries evicted.
    pub fn sweep_timers(&mut self, p: &ProtocolParams, now: SimTime) -> usize {
        let dead: Vec<(NodeId, GroupId)> = self
            .routes
            .iter()
            .filter(|(_, e)| !e.is_live(p, now))
            .map(|(k, _)| *k)
            .collect();
        for k in &dead {
            self.remove_route(*k);
        }
        self.fg.retain(|_, exp| now < *exp);
        let stale: Vec<NodeId> = self
            .neighbors
            .values()
            .filter(|e| !self.neighbor_live(e, p, now))
            .map(|e| e.neighbor)
            .collect();
        for n in stale {
            self.neighbors.remove(&n);
        }
        let expired: Vec<GroupId> = self
            .source_res
            .iter()
            .filter(|(_, r)| now >= r.expires_at)
            .map(|(g, _)| *g)
            .collect();
        for g in expired {
            let r = self.source_res.remove(&g).expect("present");
            self.consumed -= r.reserved_rate;
        }
        self.check_conservation();
        dead.len()
    }

    /// Bandwidth held according to the tables, recomputed from scratch.
    pub fn recomputed_consumed(&self) -> u64 {
        let routes: u64 = self
            .routes
            .values()
            .filter(|e| e.forwards())
            .map(|e| e.reserved_rate)
            .sum();
        let own: u64 = self.source_res.values().map(|r| r.reserved_rate).sum();
        routes + own
    }

    fn check_conservation(&mut self) {
        if self.consumed != self.recomputed_consumed() {
            self.audit.conservation_violations += 1;
        }
    }
}
