//! Unit-disk radio with a simplified shared-medium MAC.
//!
//! Two channel models:
//!
//! * `ideal`: every in-range node receives every frame. Senders only
//!   serialize their own queue, there is no carrier sense and no loss.
//! * `csma`: a sender waits a random backoff and defers while any node in
//!   its range is transmitting. Receivers that see two frames overlapping
//!   in time lose all of them (hidden terminals). Half-duplex: a node that
//!   is transmitting loses anything arriving meanwhile.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::mobility::Point;
use crate::wire::{NodeId, Packet, FRAME_HEADER_BITS};

pub const DEFAULT_QUEUE_CAPACITY: usize = 64;
const SLOT: f64 = 20e-6;
const DIFS: f64 = 50e-6;
const CW_SLOTS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ChannelModel {
    Ideal,
    #[default]
    Csma,
}

impl ChannelModel {
    pub fn name(self) -> &'static str {
        match self {
            ChannelModel::Ideal => "ideal",
            ChannelModel::Csma => "csma",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioParams {
    pub range: f64,
    /// bits/second
    pub capacity: f64,
    pub header_overhead: u64,
    pub prop_delay: f64,
}

impl Default for RadioParams {
    fn default() -> Self {
        RadioParams {
            range: 250.0,
            capacity: 2e6,
            header_overhead: FRAME_HEADER_BITS,
            prop_delay: 0.0,
        }
    }
}

pub fn frame_bits(packet: &Packet, params: &RadioParams) -> u64 {
    packet.body_bits() + params.header_overhead
}

pub fn airtime(packet: &Packet, params: &RadioParams) -> f64 {
    frame_bits(packet, params) as f64 / params.capacity
}

/// Scripted link failures, stored as unordered pairs.
#[derive(Debug, Clone, Default)]
pub struct LinkBlocks(BTreeSet<(NodeId, NodeId)>);

impl LinkBlocks {
    fn key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
        (a.min(b), a.max(b))
    }

    pub fn block(&mut self, a: NodeId, b: NodeId) {
        self.0.insert(Self::key(a, b));
    }

    pub fn unblock(&mut self, a: NodeId, b: NodeId) {
        self.0.remove(&Self::key(a, b));
    }

    pub fn is_blocked(&self, a: NodeId, b: NodeId) -> bool {
        !self.0.is_empty() && self.0.contains(&Self::key(a, b))
    }
}

pub fn in_range(a: Point, b: Point, range: f64) -> bool {
    a.distance(b) <= range
}

/// Nodes within `range` of `node` (inclusive boundary), excluding blocked links.
pub fn neighbors_of(node: NodeId, positions: &[Point], range: f64, blocks: &LinkBlocks) -> Vec<NodeId> {
    let me = positions[node as usize];
    positions
        .iter()
        .enumerate()
        .filter(|&(u, &p)| u as NodeId != node && in_range(me, p, range) && !blocks.is_blocked(node, u as NodeId))
        .map(|(u, _)| u as NodeId)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MacState {
    Idle,
    /// An attempt event is pending.
    Waiting,
    Transmitting(u64),
}

#[derive(Debug, Clone)]
struct ActiveTx {
    sender: NodeId,
    packet: Packet,
    end: SimTime,
    receivers: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy)]
struct Reception {
    tx_id: u64,
    end: SimTime,
    corrupted: bool,
}

/// What the simulator must do after a medium operation.
#[derive(Debug, Clone, PartialEq)]
pub enum MacAction {
    /// Schedule `MacAttempt(node)` at `at`.
    Attempt { node: NodeId, at: SimTime },
    /// A frame went on air; schedule `TxEnd(tx_id)` at `end`.
    Started {
        tx_id: u64,
        sender: NodeId,
        end: SimTime,
    },
    /// Deliver a frame copy at `at`.
    Deliver {
        to: NodeId,
        from: NodeId,
        packet: Packet,
        at: SimTime,
    },
    /// A frame copy was lost at `at_node` through overlap.
    Collided {
        at_node: NodeId,
        from: NodeId,
        packet: Packet,
    },
    /// Transmit queue full.
    QueueDrop { node: NodeId, packet: Packet },
}

#[derive(Debug)]
pub struct Medium {
    pub params: RadioParams,
    pub model: ChannelModel,
    queue_capacity: usize,
    queues: Vec<VecDeque<Packet>>,
    mac: Vec<MacState>,
    active: BTreeMap<u64, ActiveTx>,
    receptions: Vec<Vec<Reception>>,
    next_tx: u64,
    pub blocks: LinkBlocks,
}

impl Medium {
    pub fn new(nodes: usize, params: RadioParams, model: ChannelModel, queue_capacity: usize) -> Self {
        Medium {
            params,
            model,
            queue_capacity,
            queues: vec![VecDeque::new(); nodes],
            mac: vec![MacState::Idle; nodes],
            active: BTreeMap::new(),
            receptions: vec![Vec::new(); nodes],
            next_tx: 0,
            blocks: LinkBlocks::default(),
        }
    }

    pub fn queue_len(&self, node: NodeId) -> usize {
        self.queues[node as usize].len()
    }

    pub fn is_transmitting(&self, node: NodeId) -> bool {
        matches!(self.mac[node as usize], MacState::Transmitting(_))
    }

    pub fn active_packet(&self, tx_id: u64) -> Option<&Packet> {
        self.active.get(&tx_id).map(|a| &a.packet)
    }

    pub fn active_receivers(&self, tx_id: u64) -> &[NodeId] {
        self.active.get(&tx_id).map(|a| a.receivers.as_slice()).unwrap_or(&[])
    }

    fn backoff<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        DIFS + f64::from(rng.gen_range(0..CW_SLOTS)) * SLOT
    }

    /// Queues a frame for broadcast by `node`.
    pub fn enqueue<R: Rng + ?Sized>(
        &mut self,
        node: NodeId,
        packet: Packet,
        now: SimTime,
        positions: &[Point],
        rng: &mut R,
        out: &mut Vec<MacAction>,
    ) {
        let q = &mut self.queues[node as usize];
        if q.len() >= self.queue_capacity {
            out.push(MacAction::QueueDrop { node, packet });
            return;
        }
        q.push_back(packet);
        if self.mac[node as usize] == MacState::Idle {
            self.kick(node, now, positions, rng, out);
        }
    }

    fn kick<R: Rng + ?Sized>(
        &mut self,
        node: NodeId,
        now: SimTime,
        positions: &[Point],
        rng: &mut R,
        out: &mut Vec<MacAction>,
    ) {
        match self.model {
            ChannelModel::Ideal => self.start(node, now, positions, out),
            ChannelModel::Csma => {
                self.mac[node as usize] = MacState::Waiting;
                let at = now.plus(self.backoff(rng));
                out.push(MacAction::Attempt { node, at });
            }
        }
    }

    /// End of a backoff/defer period.
    pub fn attempt<R: Rng + ?Sized>(
        &mut self,
        node: NodeId,
        now: SimTime,
        positions: &[Point],
        rng: &mut R,
        out: &mut Vec<MacAction>,
    ) {
        if self.mac[node as usize] != MacState::Waiting {
            return;
        }
        if self.queues[node as usize].is_empty() {
            self.mac[node as usize] = MacState::Idle;
            return;
        }
        if let Some(busy_until) = self.sensed_busy_until(node, now, positions) {
            let at = busy_until.plus(self.backoff(rng));
            out.push(MacAction::Attempt { node, at });
            return;
        }
        self.start(node, now, positions, out);
    }

    /// Latest end time among frames in the air within carrier-sense range.
    fn sensed_busy_until(&self, node: NodeId, now: SimTime, positions: &[Point]) -> Option<SimTime> {
        let me = positions[node as usize];
        self.active
            .values()
            .filter(|a| {
                a.end > now
                    && a.sender != node
                    && in_range(me, positions[a.sender as usize], self.params.range)
                    && !self.blocks.is_blocked(node, a.sender)
            })
            .map(|a| a.end)
            .max()
    }

    fn start(&mut self, node: NodeId, now: SimTime, positions: &[Point], out: &mut Vec<MacAction>) {
        let packet = self.queues[node as usize]
            .pop_front()
            .expect("start with empty queue");
        let tx_id = self.next_tx;
        self.next_tx += 1;
        let end = now.plus(airtime(&packet, &self.params));
        let receivers = neighbors_of(node, positions, self.params.range, &self.blocks);

        if self.model == ChannelModel::Csma {
            // half-duplex: anything the sender was receiving is lost
            for r in self.receptions[node as usize].iter_mut() {
                if r.end > now {
                    r.corrupted = true;
                }
            }
            for &rx in &receivers {
                let rx_busy_tx = matches!(self.mac[rx as usize], MacState::Transmitting(id)
                    if self.active.get(&id).is_some_and(|a| a.end > now));
                let list = &mut self.receptions[rx as usize];
                let mut overlap = rx_busy_tx;
                for r in list.iter_mut() {
                    if r.end > now {
                        r.corrupted = true;
                        overlap = true;
                    }
                }
                list.push(Reception {
                    tx_id,
                    end,
                    corrupted: overlap,
                });
            }
        } else {
            for &rx in &receivers {
                self.receptions[rx as usize].push(Reception {
                    tx_id,
                    end,
                    corrupted: false,
                });
            }
        }

        self.mac[node as usize] = MacState::Transmitting(tx_id);
        self.active.insert(
            tx_id,
            ActiveTx {
                sender: node,
                packet,
                end,
                receivers,
            },
        );
        out.push(MacAction::Started {
            tx_id,
            sender: node,
            end,
        });
    }

    /// Frame `tx_id` finished; emits deliveries for clean receptions.
    pub fn end_tx<R: Rng + ?Sized>(
        &mut self,
        tx_id: u64,
        now: SimTime,
        positions: &[Point],
        rng: &mut R,
        out: &mut Vec<MacAction>,
    ) {
        let Some(tx) = self.active.remove(&tx_id) else {
            return;
        };
        let at = now.plus(self.params.prop_delay);
        for &rx in &tx.receivers {
            let list = &mut self.receptions[rx as usize];
            let Some(i) = list.iter().position(|r| r.tx_id == tx_id) else {
                continue;
            };
            let r = list.swap_remove(i);
            if r.corrupted {
                out.push(MacAction::Collided {
                    at_node: rx,
                    from: tx.sender,
                    packet: tx.packet.clone(),
                });
            } else {
                out.push(MacAction::Deliver {
                    to: rx,
                    from: tx.sender,
                    packet: tx.packet.clone(),
                    at,
                });
            }
        }
        let s = tx.sender as usize;
        self.mac[s] = MacState::Idle;
        if !self.queues[s].is_empty() {
            self.kick(tx.sender, now, positions, rng, out);
        }
    }
}
