//! Run counters and the derived delivery, delay and overhead metrics.

use std::collections::{BTreeMap, HashSet};

use crate::engine::SimTime;
use crate::wire::{DataKey, DataPacket, NodeId, PacketKind};

/// (source, group) identifies a flow.
pub type FlowKey = (NodeId, u32);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowStats {
    pub sent: u64,
    pub receivers: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReceiverStats {
    pub delivered: u64,
    pub delay_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryRecord {
    pub receiver: NodeId,
    pub key: DataKey,
    pub sent_at: SimTime,
    pub at: SimTime,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsLedger {
    pub flows: BTreeMap<FlowKey, FlowStats>,
    pub delivered: BTreeMap<(NodeId, FlowKey), ReceiverStats>,
    seen: HashSet<(NodeId, DataKey)>,
    pub rreq_tx: BTreeMap<NodeId, u64>,
    pub ctrl_bits: BTreeMap<PacketKind, u64>,
    pub tx_count: BTreeMap<PacketKind, u64>,
    pub mac_drops: u64,
    pub collisions: u64,
    pub rejected_auth: u64,
    pub recovery_events: u64,
    pub recoveries_completed: u64,
    pub forged_relays: u64,
    pub record_deliveries: bool,
    pub deliveries: Vec<DeliveryRecord>,
}

impl MetricsLedger {
    pub fn register_flow(&mut self, flow: FlowKey, receivers: u64) {
        self.flows.entry(flow).or_default().receivers = receivers;
    }

    pub fn on_sent(&mut self, d: &DataPacket) {
        self.flows.entry((d.source, d.group)).or_default().sent += 1;
    }

    /// Returns false for a repeat arrival, which is not counted.
    pub fn on_delivered(&mut self, receiver: NodeId, d: &DataPacket, at: SimTime) -> bool {
        if !self.seen.insert((receiver, d.key())) {
            return false;
        }
        let s = self.delivered.entry((receiver, (d.source, d.group))).or_default();
        s.delivered += 1;
        s.delay_sum += at.secs() - d.sent_at.secs();
        if self.record_deliveries {
            self.deliveries.push(DeliveryRecord {
                receiver,
                key: d.key(),
                sent_at: d.sent_at,
                at,
            });
        }
        true
    }

    /// Counted when the frame goes on the air.
    pub fn on_transmit(&mut self, node: NodeId, kind: PacketKind, bits: u64) {
        *self.tx_count.entry(kind).or_default() += 1;
        if kind.is_control() {
            *self.ctrl_bits.entry(kind).or_default() += bits;
        }
        if kind == PacketKind::Rreq {
            *self.rreq_tx.entry(node).or_default() += 1;
        }
    }

    pub fn data_sent(&self) -> u64 {
        self.flows.values().map(|f| f.sent).sum()
    }

    pub fn data_delivered(&self) -> u64 {
        self.delivered.values().map(|r| r.delivered).sum()
    }

    pub fn total_ctrl_bits(&self) -> u64 {
        self.ctrl_bits.values().sum()
    }

    pub fn total_rreq_tx(&self) -> u64 {
        self.rreq_tx.values().sum()
    }

    /// NaN when nothing was expected.
    pub fn pdr(&self) -> f64 {
        let expected: u64 = self.flows.values().map(|f| f.sent * f.receivers).sum();
        if expected == 0 {
            return f64::NAN;
        }
        self.data_delivered() as f64 / expected as f64
    }

    /// NaN when nothing was delivered.
    pub fn avg_delay(&self) -> f64 {
        let n = self.data_delivered();
        if n == 0 {
            return f64::NAN;
        }
        let sum: f64 = self.delivered.values().map(|r| r.delay_sum).sum();
        sum / n as f64
    }

    pub fn rreq_load(&self, nodes: usize) -> f64 {
        self.total_rreq_tx() as f64 / nodes as f64
    }

    /// Every flow delivered at most `sent × receivers` times.
    pub fn consistent(&self) -> bool {
        self.flows.iter().all(|(k, f)| {
            let got: u64 = self
                .delivered
                .iter()
                .filter(|((_, fk), _)| fk == k)
                .map(|(_, r)| r.delivered)
                .sum();
            got <= f.sent * f.receivers
        })
    }
}

/// Formats a metric for CSV; NaN becomes `nan`.
pub fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}
