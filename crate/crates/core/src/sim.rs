//! One simulation run: wires the scheduler, mobility, radio medium and the
//! per-node protocol state together.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Scheduler, SimTime};
use crate::medium::{self, MacAction, Medium, RadioParams};
use crate::metrics::{fmt_metric, MetricsLedger};
use crate::mobility::{self, MotionState, Point, SpeedRange};
use crate::protocol::{NodeState, OwnFlow, ProtocolParams};
use crate::recovery::{ReplyAction, ReqAction};
use crate::scenario::{ConfigError, LinkAction, Resolved, Scenario};
use crate::security::{self, JoinAction};
use crate::wire::{trace_line, DataKey, DataPacket, Direction, GroupId, JoinReq, NodeId, Packet};

/// Upper bound of the uniform delay before a source's first RREQ.
const RREQ_START_JITTER: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Delivery { to: NodeId, from: NodeId, packet: Packet },
    MacAttempt(NodeId),
    TxEnd(u64),
    Hello(NodeId),
    Int(NodeId),
    Traffic { flow: usize, k: u64 },
    Waypoint(NodeId),
    Link(usize),
    RecoveryWatch { node: NodeId, key: DataKey },
    RecoveryDeadline { node: NodeId, group: GroupId, instance: u32 },
    SecurityJoin(NodeId),
    ForgedJoin(u32),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    pub trace: bool,
    pub record_deliveries: bool,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub variant: &'static str,
    pub sources: usize,
    pub nodes: usize,
    pub channel_model: &'static str,
    pub pdr: f64,
    pub avg_delay_s: f64,
    pub rreq_per_node: f64,
    pub ctrl_bits: u64,
    pub data_sent: u64,
    pub data_delivered: u64,
    pub mac_drops: u64,
    pub buffer_drops: u64,
    pub recovery_events: u64,
    pub mesh_formed: Option<bool>,
    pub rejected_auth: u64,
}

pub const CSV_HEADER: &str = "seed,variant,sources,nodes,channel_model,pdr,avg_delay_s,rreq_per_node,ctrl_bits,data_sent,data_delivered,mac_drops,buffer_drops,recovery_events,mesh_formed,rejected_auth";

impl RunSummary {
    pub fn csv_row(&self) -> String {
        let mesh = match self.mesh_formed {
            Some(true) => "true",
            Some(false) => "false",
            None => "na",
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.variant,
            self.sources,
            self.nodes,
            self.channel_model,
            fmt_metric(self.pdr),
            fmt_metric(self.avg_delay_s),
            fmt_metric(self.rreq_per_node),
            self.ctrl_bits,
            self.data_sent,
            self.data_delivered,
            self.mac_drops,
            self.buffer_drops,
            self.recovery_events,
            mesh,
            self.rejected_auth
        )
    }
}

pub struct Simulation {
    pub scenario: Scenario,
    pub params: ProtocolParams,
    pub resolved: Resolved,
    sched: Scheduler<EventKind>,
    rng: ChaCha8Rng,
    motion: Vec<MotionState>,
    speed: SpeedRange,
    pub nodes: Vec<NodeState>,
    pub medium: Medium,
    pub metrics: MetricsLedger,
    end: SimTime,
    trace: Option<String>,
    security_snapshot: Option<Vec<Point>>,
    mac_out: Vec<MacAction>,
}

impl Simulation {
    pub fn new(scenario: Scenario, opts: SimOptions) -> Result<Self, ConfigError> {
        scenario.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        let resolved = scenario.resolve(&mut rng);
        let params = scenario.protocol_params();
        let n = scenario.nodes;
        let speed = SpeedRange {
            min: scenario.min_speed,
            max: scenario.max_speed,
        };
        let area = scenario.area();

        let motion: Vec<MotionState> = resolved
            .initial
            .iter()
            .map(|&p| {
                if resolved.mobile {
                    mobility::pick_waypoint(&mut rng, p, SimTime::ZERO, area, speed)
                } else {
                    MotionState::stationary(p)
                }
            })
            .collect();

        let radio = RadioParams {
            range: scenario.range,
            capacity: scenario.capacity,
            ..RadioParams::default()
        };
        let medium = Medium::new(n, radio, scenario.channel_model, scenario.queue_capacity);

        let mut nodes: Vec<NodeState> = (0..n as NodeId).map(NodeState::new).collect();
        for (&g, m) in &resolved.members {
            for &id in m {
                nodes[id as usize].memberships.insert(g);
            }
        }
        let mut metrics = MetricsLedger::default();
        metrics.record_deliveries = opts.record_deliveries;
        for f in &resolved.flows {
            nodes[f.source as usize].own_flows.push(OwnFlow {
                group: f.group,
                b_req: f.b_req,
                max_delay: f.max_delay,
                next_flow_seq: 0,
            });
            metrics.register_flow((f.source, f.group), resolved.receivers(f) as u64);
        }

        let end = SimTime::from_secs(scenario.duration);
        let mut sim = Simulation {
            params,
            resolved,
            sched: Scheduler::new(),
            rng,
            motion,
            speed,
            nodes,
            medium,
            metrics,
            end,
            trace: opts.trace.then(String::new),
            security_snapshot: None,
            mac_out: Vec::new(),
            scenario,
        };
        sim.bootstrap();
        Ok(sim)
    }

    fn at(&mut self, t: SimTime, ev: EventKind) {
        if t <= self.end {
            self.sched.schedule(t, ev).expect("never schedules into the past");
        }
    }

    fn bootstrap(&mut self) {
        for (i, e) in self.scenario.link_events.clone().iter().enumerate() {
            self.at(SimTime::from_secs(e.at), EventKind::Link(i));
        }
        if self.resolved.mobile {
            for i in 0..self.nodes.len() {
                let a = self.motion[i].arrival();
                self.at(a, EventKind::Waypoint(i as NodeId));
            }
        }
        if self.params.variant.qos() {
            for i in 0..self.nodes.len() {
                let phase = self.rng.gen_range(0.0..self.params.hello_interval);
                self.at(SimTime::from_secs(phase), EventKind::Hello(i as NodeId));
            }
        }
        let mut first_packet: BTreeMap<NodeId, f64> = BTreeMap::new();
        for f in &self.resolved.flows {
            let e = first_packet.entry(f.source).or_insert(f.start);
            *e = e.min(f.start);
        }
        for (s, start) in first_packet {
            let base = (start - self.scenario.discovery_lead).max(0.0);
            let t0 = SimTime::from_secs(base + self.rng.gen_range(0.0..RREQ_START_JITTER));
            self.nodes[s as usize].next_int = Some(t0);
            self.at(t0, EventKind::Int(s));
        }
        let stop = self.scenario.duration - self.scenario.drain;
        for (i, f) in self.resolved.flows.clone().iter().enumerate() {
            if f.start >= stop {
                continue;
            }
            self.at(SimTime::from_secs(f.start), EventKind::Traffic { flow: i, k: 0 });
        }
        let sec = self.scenario.security.clone();
        if sec.enabled {
            for &s in &sec.snodes {
                let t = self.rng.gen_range(0.0..=sec.join_window);
                self.at(SimTime::from_secs(t), EventKind::SecurityJoin(s));
            }
            if sec.attacker.is_some() {
                for i in 0..sec.forged_joins {
                    let t = self.rng.gen_range(0.0..=sec.join_window);
                    self.at(SimTime::from_secs(t), EventKind::ForgedJoin(i));
                }
            }
        }
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn end_time(&self) -> SimTime {
        self.end
    }

    pub fn positions(&self) -> Vec<Point> {
        let t = self.now();
        self.motion.iter().map(|m| m.position_at(t)).collect()
    }

    /// Current radio neighbors of `node`, from true positions.
    pub fn true_neighbors(&self, node: NodeId) -> Vec<NodeId> {
        medium::neighbors_of(node, &self.positions(), self.scenario.range, &self.medium.blocks)
    }

    /// Bandwidth held by `node` plus all of its current true neighbors.
    pub fn neighborhood_load(&self, node: NodeId, positions: &[Point]) -> u64 {
        let nb = medium::neighbors_of(node, positions, self.scenario.range, &self.medium.blocks);
        self.nodes[node as usize].consumed + nb.iter().map(|&u| self.nodes[u as usize].consumed).sum::<u64>()
    }

    fn trace(&mut self, node: NodeId, dir: Direction, peer: Option<NodeId>, packet: &Packet, extra: &str) {
        let now = self.now();
        if let Some(buf) = self.trace.as_mut() {
            let peer = peer.map_or_else(|| "-".to_string(), |p| p.to_string());
            buf.push_str(&trace_line(now, node, dir, &peer, packet));
            buf.push_str(extra);
            buf.push('\n');
        }
    }

    fn send(&mut self, node: NodeId, packet: Packet) {
        let now = self.now();
        let positions = self.positions();
        let mut out = std::mem::take(&mut self.mac_out);
        self.medium.enqueue(node, packet, now, &positions, &mut self.rng, &mut out);
        self.apply_mac(&mut out);
        self.mac_out = out;
    }

    fn apply_mac(&mut self, out: &mut Vec<MacAction>) {
        for a in out.drain(..) {
            match a {
                MacAction::Attempt { node, at } => self.at(at, EventKind::MacAttempt(node)),
                MacAction::Started { tx_id, sender, end } => {
                    let packet = self.medium.active_packet(tx_id).expect("on air").clone();
                    let bits = medium::frame_bits(&packet, &self.medium.params);
                    self.metrics.on_transmit(sender, packet.kind(), bits);
                    self.trace(sender, Direction::Tx, None, &packet, "");
                    self.at(end, EventKind::TxEnd(tx_id));
                }
                MacAction::Deliver { to, from, packet, at } => {
                    self.at(at, EventKind::Delivery { to, from, packet });
                }
                MacAction::Collided { at_node, from, packet } => {
                    self.metrics.collisions += 1;
                    self.trace(at_node, Direction::Drop, Some(from), &packet, " reason=collision");
                }
                MacAction::QueueDrop { node, packet } => {
                    self.metrics.mac_drops += 1;
                    self.trace(node, Direction::Drop, None, &packet, " reason=queue");
                }
            }
        }
    }

    /// Processes one event. Returns false once the horizon is reached.
    pub fn step(&mut self) -> bool {
        let Some(ev) = self.sched.pop_until(self.end) else {
            self.sched.advance_to(self.end);
            return false;
        };
        self.handle(ev.payload);
        true
    }

    pub fn run(&mut self) {
        while self.step() {}
    }

    /// Processes every event due at or before `t` (capped at the horizon).
    pub fn run_until(&mut self, t: SimTime) {
        let limit = if t < self.end { t } else { self.end };
        while let Some(ev) = self.sched.pop_until(limit) {
            self.handle(ev.payload);
        }
    }

    fn handle(&mut self, ev: EventKind) {
        let now = self.now();
        match ev {
            EventKind::MacAttempt(n) => {
                let positions = self.positions();
                let mut out = std::mem::take(&mut self.mac_out);
                self.medium.attempt(n, now, &positions, &mut self.rng, &mut out);
                self.apply_mac(&mut out);
                self.mac_out = out;
            }
            EventKind::TxEnd(id) => {
                let positions = self.positions();
                let mut out = std::mem::take(&mut self.mac_out);
                self.medium.end_tx(id, now, &positions, &mut self.rng, &mut out);
                self.apply_mac(&mut out);
                self.mac_out = out;
            }
            EventKind::Delivery { to, from, packet } => self.deliver(to, from, packet),
            EventKind::Hello(n) => {
                let h = self.nodes[n as usize].emit_hello(&self.params, now);
                self.send(n, Packet::Hello(h));
                self.at(now.plus(self.params.hello_interval), EventKind::Hello(n));
            }
            EventKind::Int(n) => {
                if self.nodes[n as usize].next_int != Some(now) {
                    return;
                }
                if let Some(r) = self.nodes[n as usize].originate_rreq(&self.params, now) {
                    self.send(n, Packet::Rreq(r));
                    let next = self.nodes[n as usize].next_int.expect("set by originate");
                    self.at(next, EventKind::Int(n));
                }
            }
            EventKind::Traffic { flow, k } => self.traffic(flow, k),
            EventKind::Waypoint(n) => {
                let area = self.scenario.area();
                let cur = self.motion[n as usize];
                let next = mobility::on_arrival(&cur, self.scenario.pause, &mut self.rng, area, self.speed);
                self.motion[n as usize] = next;
                self.at(next.arrival(), EventKind::Waypoint(n));
            }
            EventKind::Link(i) => {
                let e = self.scenario.link_events[i].clone();
                match e.action {
                    LinkAction::Down => self.medium.blocks.block(e.a, e.b),
                    LinkAction::Up => self.medium.blocks.unblock(e.a, e.b),
                }
            }
            EventKind::RecoveryWatch { node, key } => self.watch_fired(node, key),
            EventKind::RecoveryDeadline { node, group, instance } => {
                self.nodes[node as usize].recovery.deadline_expired(group, instance);
            }
            EventKind::SecurityJoin(n) => {
                let j = self.nodes[n as usize].security.start_join(&self.scenario.security, n);
                self.send(n, Packet::JoinReq(j));
            }
            EventKind::ForgedJoin(i) => {
                let sec = &self.scenario.security;
                let attacker = sec.attacker.expect("validated");
                let claimed = sec.snodes.first().copied().unwrap_or(attacker);
                let nonce = 1_000_000 + i;
                let mut auth: u64 = self.rng.gen();
                if auth == security::authenticator(&sec.auth_key, claimed, nonce) {
                    auth ^= 1;
                }
                let j = JoinReq {
                    origin_snode: claimed,
                    nonce,
                    ttl: sec.join_ttl,
                    auth,
                    reverse_path_hint: attacker,
                };
                self.send(attacker, Packet::JoinReq(j));
            }
        }
    }

    fn traffic(&mut self, flow: usize, k: u64) {
        let now = self.now();
        let f = self.resolved.flows[flow].clone();
        let s = f.source as usize;
        self.nodes[s].sweep_timers(&self.params, now);
        if self.nodes[s].may_send(&self.params, f.group, now) {
            let d = self.nodes[s].originate_data(f.group, self.scenario.payload, now);
            self.metrics.on_sent(&d);
            self.send(f.source, Packet::Data(d));
        }
        // tick times are computed, not accumulated
        let next = f.start + (k + 1) as f64 / f.rate;
        if next < self.scenario.duration - self.scenario.drain {
            self.at(SimTime::from_secs(next), EventKind::Traffic { flow, k: k + 1 });
        }
    }

    fn chain_lifetime(&self) -> f64 {
        self.params.fg_timeout
    }

    fn deliver(&mut self, to: NodeId, from: NodeId, packet: Packet) {
        let now = self.now();
        self.trace(to, Direction::Rx, Some(from), &packet, "");
        let p = self.params.clone();
        let me = to;
        let ui = to as usize;
        match packet {
            Packet::Hello(h) => {
                self.nodes[ui].process_hello(&p, &h, now);
                self.maybe_trigger_hello(me);
            }
            Packet::Rreq(r) => {
                let out = self.nodes[ui].process_rreq(&p, &r, now);
                if let Some(reply) = out.reply {
                    self.send(me, Packet::Reply(reply));
                }
                if let Some(fwd) = out.rebroadcast {
                    self.send(me, Packet::Rreq(fwd));
                }
                if out.consolidated {
                    let next = self.nodes[ui].next_int.expect("set by consolidation");
                    self.at(next, EventKind::Int(me));
                }
            }
            Packet::Reply(r) => {
                let out = self.nodes[ui].process_reply(&p, &r, now);
                self.maybe_trigger_hello(me);
                if let Some(relay) = out.relay {
                    self.send(me, Packet::Reply(relay));
                }
            }
            Packet::Data(d) => self.on_data(me, from, d),
            Packet::RecoveryReq(req) => {
                if !self.scenario.recovery_enabled() {
                    return;
                }
                match self.nodes[ui].recovery.process_request(me, &req) {
                    ReqAction::Reply(rep) => self.send(me, Packet::RecoveryReply(rep)),
                    ReqAction::Relay(fwd) => self.send(me, Packet::RecoveryReq(fwd)),
                    ReqAction::Drop => {}
                }
            }
            Packet::RecoveryReply(rep) => {
                if !self.scenario.recovery_enabled() {
                    return;
                }
                match self.nodes[ui].recovery.process_reply(me, &rep, from, now) {
                    ReplyAction::Patch {
                        group,
                        sources,
                        upstream,
                        relay,
                    } => {
                        self.nodes[ui].install_patch(&p, group, &sources, upstream, now);
                        self.send(me, Packet::RecoveryReply(relay));
                    }
                    ReplyAction::Completed { flush, .. } => {
                        self.metrics.recoveries_completed += 1;
                        for d in flush {
                            self.rebroadcast_data(me, d);
                        }
                    }
                    ReplyAction::Ignore => {}
                }
            }
            Packet::JoinReq(j) => {
                if !self.scenario.security.enabled {
                    return;
                }
                self.security_snapshot = Some(self.positions());
                let sec = self.scenario.security.clone();
                match self.nodes[ui].security.process_join_req(&sec, me, &j, from) {
                    JoinAction::Relay(fwd) => {
                        if !security::verify(&sec.auth_key, &fwd) {
                            self.metrics.forged_relays += 1;
                        }
                        self.send(me, Packet::JoinReq(fwd));
                    }
                    JoinAction::Reply(rep) => self.send(me, Packet::JoinReply(rep)),
                    JoinAction::Drop | JoinAction::Rejected => {}
                }
            }
            Packet::JoinReply(rep) => {
                if !self.scenario.security.enabled {
                    return;
                }
                self.security_snapshot = Some(self.positions());
                if let Some(fwd) = self.nodes[ui].security.process_join_reply(me, &rep) {
                    self.send(me, Packet::JoinReply(fwd));
                }
            }
        }
    }

    fn maybe_trigger_hello(&mut self, n: NodeId) {
        let now = self.now();
        if let Some(h) = self.nodes[n as usize].triggered_hello(&self.params, now) {
            self.send(n, Packet::Hello(h));
        }
    }

    fn on_data(&mut self, me: NodeId, from: NodeId, d: DataPacket) {
        let now = self.now();
        let ui = me as usize;
        let recovery = self.scenario.recovery_enabled();
        if recovery {
            let life = self.chain_lifetime();
            let rp = self.scenario.recovery.clone();
            self.nodes[ui].recovery.overhear(&rp, d.key(), from, now, life);
        }
        let out = self.nodes[ui].forward_data(&self.params, &d, now);
        if out.deliver {
            self.metrics.on_delivered(me, &d, now);
        }
        if !out.rebroadcast {
            return;
        }
        if recovery && self.nodes[ui].recovery.is_recovering(d.group) {
            let rp = self.scenario.recovery.clone();
            self.nodes[ui].recovery.buffer_packet(&rp, d);
            return;
        }
        self.rebroadcast_data(me, d);
    }

    fn rebroadcast_data(&mut self, me: NodeId, d: DataPacket) {
        let now = self.now();
        if self.scenario.recovery_enabled() {
            let rp = self.scenario.recovery.clone();
            let life = self.chain_lifetime();
            if let Some(deadline) = self.nodes[me as usize].recovery.watch(&rp, &d, now, life) {
                self.at(deadline, EventKind::RecoveryWatch { node: me, key: d.key() });
            }
        }
        self.send(me, Packet::Data(d));
    }

    fn watch_fired(&mut self, node: NodeId, key: DataKey) {
        let now = self.now();
        let ui = node as usize;
        let rp = self.scenario.recovery.clone();
        let life = self.chain_lifetime();
        let sources = self.nodes[ui].forwarded_sources(&self.params, key.1, now);
        let Some(req) = self.nodes[ui].recovery.watch_expired(&rp, node, key, sources, now, life) else {
            return;
        };
        self.metrics.recovery_events += 1;
        let (group, instance) = (req.group, req.instance);
        self.send(node, Packet::RecoveryReq(req));
        self.at(now.plus(rp.reply_timeout), EventKind::RecoveryDeadline { node, group, instance });
    }

    /// Adjacency used for the mesh predicate: topology at the last join
    /// activity, or at the current time if there was none.
    fn security_adjacency(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let pos = self.security_snapshot.clone().unwrap_or_else(|| self.positions());
        (0..self.nodes.len() as NodeId)
            .map(|i| (i, medium::neighbors_of(i, &pos, self.scenario.range, &self.medium.blocks)))
            .collect()
    }

    pub fn mesh_formed(&self) -> Option<bool> {
        let sec = &self.scenario.security;
        if !sec.enabled {
            return None;
        }
        let marked: BTreeSet<NodeId> = self
            .nodes
            .iter()
            .filter(|n| n.security.forwarding_attr)
            .map(|n| n.id)
            .collect();
        Some(security::mesh_formed(&sec.snodes, sec.join_ttl, &self.security_adjacency(), &marked))
    }

    pub fn marked_nodes(&self) -> BTreeSet<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.security.forwarding_attr)
            .map(|n| n.id)
            .collect()
    }

    /// Adjacency at the last security event.
    pub fn mesh_adjacency(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        self.security_adjacency()
    }

    /// Sum of all node audit violations.
    pub fn audit_violations(&self) -> u64 {
        self.nodes.iter().map(|n| n.audit.violations()).sum()
    }

    pub fn summary(&self) -> RunSummary {
        let m = &self.metrics;
        let buffer_drops: u64 = self.nodes.iter().map(|n| n.recovery.buffer_drops).sum();
        let rejected_auth: u64 = self.nodes.iter().map(|n| n.security.rejected_auth).sum();
        let sources: BTreeSet<NodeId> = self.resolved.flows.iter().map(|f| f.source).collect();
        RunSummary {
            seed: self.scenario.seed,
            variant: self.scenario.variant.name(),
            sources: sources.len(),
            nodes: self.scenario.nodes,
            channel_model: self.scenario.channel_model.name(),
            pdr: m.pdr(),
            avg_delay_s: m.avg_delay(),
            rreq_per_node: m.rreq_load(self.scenario.nodes),
            ctrl_bits: m.total_ctrl_bits(),
            data_sent: m.data_sent(),
            data_delivered: m.data_delivered(),
            mac_drops: m.mac_drops,
            buffer_drops,
            recovery_events: m.recovery_events,
            mesh_formed: self.mesh_formed(),
            rejected_auth,
        }
    }

    pub fn take_trace(&mut self) -> String {
        self.trace.take().unwrap_or_default()
    }
}

/// Result of [`run_scenario`].
pub struct RunOutput {
    pub summary: RunSummary,
    pub trace: String,
    pub sim: Simulation,
}

pub fn run_scenario(scenario: Scenario, opts: SimOptions) -> Result<RunOutput, ConfigError> {
    let mut sim = Simulation::new(scenario, opts)?;
    sim.run();
    let summary = sim.summary();
    let trace = sim.take_trace();
    Ok(RunOutput { summary, trace, sim })
}

/// Header plus rows, newline-terminated.
pub fn csv_document(rows: &[RunSummary]) -> String {
    let mut s = String::new();
    writeln!(s, "{CSV_HEADER}").expect("string write");
    for r in rows {
        writeln!(s, "{}", r.csv_row()).expect("string write");
    }
    s
}
