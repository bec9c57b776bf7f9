//! Local route recovery.
//!
//! A forwarding node learns the ordered list of downstream forwarders and
//! the receiver from the `fg_chain` carried by Replies. After rebroadcasting
//! a data packet it expects to overhear one of them rebroadcast the same
//! packet. Silence for `detect_timeout` means a break: watched packets move
//! to a buffer and a TTL-scoped RecoveryReq asks nearby nodes for any chain
//! member. The first reply before `reply_timeout` patches the route through
//! the relays on its path and flushes the buffer; otherwise the buffer is
//! discarded and the next discovery round repairs the mesh.

use std::collections::{BTreeMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::wire::{DataKey, DataPacket, GroupId, NodeId, RecoveryReply, RecoveryReq};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryParams {
    pub enabled: bool,
    pub detect_timeout: f64,
    pub reply_timeout: f64,
    pub ttl_hops: u32,
    pub buffer_capacity: usize,
}

impl Default for RecoveryParams {
    fn default() -> Self {
        RecoveryParams {
            enabled: true,
            detect_timeout: 1.0,
            reply_timeout: 0.1,
            ttl_hops: 2,
            buffer_capacity: 32,
        }
    }
}

impl RecoveryParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.detect_timeout.is_finite() && self.detect_timeout > 0.0) {
            return Err("recovery.detect_timeout must be positive".into());
        }
        if !(self.reply_timeout.is_finite() && self.reply_timeout > 0.0) {
            return Err("recovery.reply_timeout must be positive".into());
        }
        if self.ttl_hops == 0 {
            return Err("recovery.ttl_hops must be at least 1".into());
        }
        if self.buffer_capacity == 0 {
            return Err("recovery.buffer_capacity must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LearnedChain {
    chain: Vec<NodeId>,
    learned_at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Watch {
    pub packet: DataPacket,
    pub deadline: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveRecovery {
    pub instance: u32,
    pub deadline: SimTime,
    pub started_at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReqAction {
    Reply(RecoveryReply),
    Relay(RecoveryReq),
    Drop,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplyAction {
    /// This node is an intermediate relay: install forwarding state for the
    /// group with `upstream` toward the origin, then pass `relay` on.
    Patch {
        group: GroupId,
        sources: Vec<NodeId>,
        upstream: NodeId,
        relay: RecoveryReply,
    },
    /// This node started the recovery; re-forward `flush` in order.
    Completed {
        group: GroupId,
        flush: Vec<DataPacket>,
    },
    Ignore,
}

/// Flow a chain was learned for.
pub type FlowKey = (NodeId, GroupId);

#[derive(Debug, Default)]
pub struct RecoveryState {
    /// Per flow, one chain per immediate downstream hop.
    chains: BTreeMap<FlowKey, BTreeMap<NodeId, LearnedChain>>,
    last_chain: BTreeMap<GroupId, Vec<NodeId>>,
    /// Senders already heard for recent packets, so a rebroadcast that beat
    /// this node's own transmission still counts.
    heard: BTreeMap<DataKey, (SimTime, Vec<NodeId>)>,
    heard_cap: usize,
    pub watches: BTreeMap<DataKey, Watch>,
    pub buffers: BTreeMap<GroupId, VecDeque<DataPacket>>,
    pub active: BTreeMap<GroupId, ActiveRecovery>,
    next_instance: u32,
    seen_requests: HashSet<(NodeId, GroupId, u32)>,
    seen_replies: HashSet<(NodeId, GroupId, u32)>,
    pub initiated: u64,
    pub completed: u64,
    pub buffer_drops: u64,
}

const HEARD_PRUNE_AT: usize = 512;

impl RecoveryState {
    /// Records the chain carried by an incoming Reply for `flow`. `chain` is
    /// ordered from the receiver toward this node; its last element is the
    /// immediate downstream hop.
    pub fn learn_chain(&mut self, flow: FlowKey, chain: &[NodeId], now: SimTime) {
        let Some(&next_hop) = chain.last() else {
            return;
        };
        self.chains.entry(flow).or_default().insert(
            next_hop,
            LearnedChain {
                chain: chain.to_vec(),
                learned_at: now,
            },
        );
        self.last_chain.insert(flow.1, chain.to_vec());
    }

    /// Most recently learned chain for `group`.
    pub fn chain(&self, group: GroupId) -> Option<&[NodeId]> {
        self.last_chain.get(&group).map(Vec::as_slice)
    }

    fn live_chains(&self, flow: FlowKey, now: SimTime, lifetime: f64) -> impl Iterator<Item = &Vec<NodeId>> {
        self.chains
            .get(&flow)
            .into_iter()
            .flat_map(|m| m.values())
            .filter(move |c| now.secs() - c.learned_at.secs() <= lifetime)
            .map(|c| &c.chain)
    }

    /// Union of the group's live chains over all sources, in first-seen order.
    pub fn candidates(&self, group: GroupId, now: SimTime, lifetime: f64) -> Vec<NodeId> {
        let mut out = Vec::new();
        let flows: Vec<FlowKey> = self.chains.keys().filter(|k| k.1 == group).copied().collect();
        for f in flows {
            for c in self.live_chains(f, now, lifetime) {
                for &n in c {
                    if !out.contains(&n) {
                        out.push(n);
                    }
                }
            }
        }
        out
    }

    /// True when some live chain of the flow has a forwarder below this
    /// node, i.e. there is a rebroadcast to overhear.
    pub fn has_downstream_forwarder(&self, flow: FlowKey, now: SimTime, lifetime: f64) -> bool {
        self.live_chains(flow, now, lifetime).any(|c| c.len() >= 2)
    }

    pub fn is_recovering(&self, group: GroupId) -> bool {
        self.active.contains_key(&group)
    }

    fn heard_from_chain(&self, key: DataKey, now: SimTime, lifetime: f64) -> bool {
        let Some((_, senders)) = self.heard.get(&key) else {
            return false;
        };
        self.live_chains((key.0, key.1), now, lifetime)
            .any(|c| senders.iter().any(|s| c.contains(s)))
    }

    /// Registers a watch after this node rebroadcast `packet`. Returns the
    /// deadline when a watch was set.
    pub fn watch(
        &mut self,
        p: &RecoveryParams,
        packet: &DataPacket,
        now: SimTime,
        chain_lifetime: f64,
    ) -> Option<SimTime> {
        let key = packet.key();
        if !self.has_downstream_forwarder((key.0, key.1), now, chain_lifetime)
            || self.heard_from_chain(key, now, chain_lifetime)
        {
            return None;
        }
        let deadline = now.plus(p.detect_timeout);
        self.watches.insert(
            key,
            Watch {
                packet: packet.clone(),
                deadline,
            },
        );
        Some(deadline)
    }

    /// Notes a copy of `key` from `from`. A chain member's copy clears the
    /// watch on `key` and on every earlier packet of the same flow. Returns
    /// true if a watch was cleared.
    pub fn overhear(&mut self, p: &RecoveryParams, key: DataKey, from: NodeId, now: SimTime, chain_lifetime: f64) -> bool {
        if self.heard.len() >= self.heard_cap.max(HEARD_PRUNE_AT) {
            // watches are set soon after first hearing a packet
            let horizon = now.secs() - 2.0 * p.detect_timeout;
            self.heard.retain(|_, (t, _)| t.secs() >= horizon);
            self.heard_cap = 2 * self.heard.len();
        }
        let e = self.heard.entry(key).or_insert_with(|| (now, Vec::new()));
        if !e.1.contains(&from) {
            e.1.push(from);
        }
        let member = self.live_chains((key.0, key.1), now, chain_lifetime).any(|c| c.contains(&from));
        if !member {
            return false;
        }
        // a later packet of the same flow proves the link for earlier ones
        let stale: Vec<DataKey> = self
            .watches
            .range((key.0, key.1, 0)..=key)
            .map(|(k, _)| *k)
            .collect();
        for k in &stale {
            self.watches.remove(k);
        }
        !stale.is_empty()
    }

    fn push_buffer(&mut self, p: &RecoveryParams, packet: DataPacket) {
        let buf = self.buffers.entry(packet.group).or_default();
        if buf.iter().any(|d| d.key() == packet.key()) {
            return;
        }
        if buf.len() == p.buffer_capacity {
            buf.pop_front();
            self.buffer_drops += 1;
        }
        buf.push_back(packet);
    }

    /// Holds a packet that arrived while its group is being recovered.
    pub fn buffer_packet(&mut self, p: &RecoveryParams, packet: DataPacket) {
        self.push_buffer(p, packet);
    }

    /// Handles a watch timer. Returns a request to broadcast when this
    /// expiry starts a new recovery.
    #[allow(clippy::too_many_arguments)]
    pub fn watch_expired(
        &mut self,
        p: &RecoveryParams,
        me: NodeId,
        key: DataKey,
        sources: Vec<NodeId>,
        now: SimTime,
        chain_lifetime: f64,
    ) -> Option<RecoveryReq> {
        match self.watches.get(&key) {
            Some(w) if w.deadline == now => {}
            _ => return None,
        }
        let group = key.1;
        let mut stale: Vec<DataPacket> = Vec::new();
        let keys: Vec<DataKey> = self.watches.keys().filter(|k| k.1 == group).copied().collect();
        for k in keys {
            stale.push(self.watches.remove(&k).expect("present").packet);
        }
        stale.sort_by_key(|d| (d.source, d.flow_seq));
        for d in stale {
            self.push_buffer(p, d);
        }
        if self.active.contains_key(&group) {
            return None;
        }
        let candidates = self.candidates(group, now, chain_lifetime);
        if candidates.is_empty() {
            return None;
        }
        self.next_instance += 1;
        let instance = self.next_instance;
        self.active.insert(
            group,
            ActiveRecovery {
                instance,
                deadline: now.plus(p.reply_timeout),
                started_at: now,
            },
        );
        self.seen_requests.insert((me, group, instance));
        self.initiated += 1;
        Some(RecoveryReq {
            origin: me,
            group,
            instance,
            ttl_hops: p.ttl_hops,
            candidates,
            sources,
            via: Vec::new(),
        })
    }

    /// Reply deadline. Returns the number of buffered packets discarded, or
    /// `None` if the recovery already completed.
    pub fn deadline_expired(&mut self, group: GroupId, instance: u32) -> Option<usize> {
        match self.active.get(&group) {
            Some(a) if a.instance == instance => {}
            _ => return None,
        }
        self.active.remove(&group);
        let dropped = self.buffers.remove(&group).map_or(0, |b| b.len());
        self.buffer_drops += dropped as u64;
        Some(dropped)
    }

    pub fn process_request(&mut self, me: NodeId, req: &RecoveryReq) -> ReqAction {
        if req.origin == me || !self.seen_requests.insert((req.origin, req.group, req.instance)) {
            return ReqAction::Drop;
        }
        if req.candidates.contains(&me) {
            let mut path_back: Vec<NodeId> = req.via.iter().rev().copied().collect();
            path_back.push(req.origin);
            return ReqAction::Reply(RecoveryReply {
                responder: me,
                origin: req.origin,
                group: req.group,
                instance: req.instance,
                path_back,
                sources: req.sources.clone(),
            });
        }
        if req.ttl_hops > 1 {
            let mut via = req.via.clone();
            via.push(me);
            return ReqAction::Relay(RecoveryReq {
                ttl_hops: req.ttl_hops - 1,
                via,
                ..req.clone()
            });
        }
        ReqAction::Drop
    }

    /// `from` is the node whose transmission carried the reply.
    pub fn process_reply(&mut self, me: NodeId, reply: &RecoveryReply, from: NodeId, now: SimTime) -> ReplyAction {
        if reply.path_back.first() != Some(&me) {
            return ReplyAction::Ignore;
        }
        if reply.origin == me {
            let Some(a) = self.active.get(&reply.group) else {
                return ReplyAction::Ignore;
            };
            if a.instance != reply.instance || now >= a.deadline {
                return ReplyAction::Ignore;
            }
            self.active.remove(&reply.group);
            self.completed += 1;
            let chain = if from == reply.responder {
                vec![reply.responder]
            } else {
                vec![reply.responder, from]
            };
            for &src in &reply.sources {
                self.learn_chain((src, reply.group), &chain, now);
            }
            let mut flush: Vec<DataPacket> = self.buffers.remove(&reply.group).unwrap_or_default().into();
            flush.sort_by_key(|d| (d.source, d.flow_seq));
            return ReplyAction::Completed {
                group: reply.group,
                flush,
            };
        }
        if !self.seen_replies.insert((reply.origin, reply.group, reply.instance)) {
            return ReplyAction::Ignore;
        }
        let rest = reply.path_back[1..].to_vec();
        let upstream = rest[0];
        let mut relay = reply.clone();
        relay.path_back = rest;
        ReplyAction::Patch {
            group: reply.group,
            sources: reply.sources.clone(),
            upstream,
            relay,
        }
    }
}
