//! Messages exchanged between nodes and their modeled sizes.
//!
//! Nothing is encoded to bytes. Each packet has a fixed field layout that
//! determines its size on air:
//!
//! | field class          | bits |
//! |----------------------|------|
//! | packet kind tag      | 8    |
//! | node / group id      | 32   |
//! | rate, time, integer  | 32   |
//! | authenticator        | 64   |
//! | list length prefix   | 16   |
//!
//! Every frame additionally carries a 48-byte link/network header
//! ([`FRAME_HEADER_BITS`]). Data packet fields (source, group, sequence,
//! timestamp) are counted inside that header, so a data frame is
//! `payload + 384` bits.

use std::fmt::{self, Write as _};

use crate::engine::SimTime;

pub type NodeId = u32;
pub type GroupId = u32;

pub const FRAME_HEADER_BITS: u64 = 48 * 8;
pub const DEFAULT_PAYLOAD_BYTES: u32 = 512;

const TAG: u64 = 8;
const ID: u64 = 32;
const WORD: u64 = 32;
const AUTH: u64 = 64;
const LEN: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Hello {
    pub origin: NodeId,
    pub b_available: f64,
    /// Originator's reserved outbound rate, bits/s.
    pub consumed_rate: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceRow {
    pub source: NodeId,
    pub group: GroupId,
    pub seq: u32,
    /// bits/s
    pub b_req: u64,
    pub max_delay: f64,
    pub hop_count: u32,
}

impl SourceRow {
    pub fn key(&self) -> (NodeId, GroupId, u32) {
        (self.source, self.group, self.seq)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rreq {
    pub rows: Vec<SourceRow>,
    pub relay: NodeId,
    /// The relay's one-hop neighbors with their co-neighbor counts.
    pub relay_neighbors: Vec<(NodeId, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplyEntry {
    pub source: NodeId,
    pub group: GroupId,
    pub seq: u32,
    pub next_node: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub entries: Vec<ReplyEntry>,
    pub origin: NodeId,
    /// Receiver first, then each forwarding node that relayed this reply.
    pub fg_chain: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPacket {
    pub source: NodeId,
    pub group: GroupId,
    pub flow_seq: u32,
    pub payload_bytes: u32,
    pub sent_at: SimTime,
}

pub type DataKey = (NodeId, GroupId, u32);

impl DataPacket {
    pub fn key(&self) -> DataKey {
        (self.source, self.group, self.flow_seq)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReq {
    pub origin: NodeId,
    pub group: GroupId,
    /// Per-origin detection counter; `(origin, group, instance)` deduplicates.
    pub instance: u32,
    pub ttl_hops: u32,
    pub candidates: Vec<NodeId>,
    /// Sources whose routes the origin was forwarding for this group.
    pub sources: Vec<NodeId>,
    /// Relays traversed so far, nearest to the origin first.
    pub via: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReply {
    pub responder: NodeId,
    pub origin: NodeId,
    pub group: GroupId,
    pub instance: u32,
    /// Remaining hops back to the origin; the head is the next processor and
    /// the last element is the origin itself.
    pub path_back: Vec<NodeId>,
    pub sources: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinReq {
    pub origin_snode: NodeId,
    pub nonce: u32,
    pub ttl: u32,
    pub auth: u64,
    pub reverse_path_hint: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinReply {
    pub from_snode: NodeId,
    pub to_snode: NodeId,
    pub nonce: u32,
    /// Node that should process this copy next.
    pub via: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Packet {
    Hello(Hello),
    Rreq(Rreq),
    Reply(Reply),
    Data(DataPacket),
    RecoveryReq(RecoveryReq),
    RecoveryReply(RecoveryReply),
    JoinReq(JoinReq),
    JoinReply(JoinReply),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PacketKind {
    Hello,
    Rreq,
    Reply,
    Data,
    RecoveryReq,
    RecoveryReply,
    JoinReq,
    JoinReply,
}

impl PacketKind {
    pub const ALL: [PacketKind; 8] = [
        PacketKind::Hello,
        PacketKind::Rreq,
        PacketKind::Reply,
        PacketKind::Data,
        PacketKind::RecoveryReq,
        PacketKind::RecoveryReply,
        PacketKind::JoinReq,
        PacketKind::JoinReply,
    ];

    pub fn is_control(self) -> bool {
        self != PacketKind::Data
    }

    pub fn name(self) -> &'static str {
        match self {
            PacketKind::Hello => "HELLO",
            PacketKind::Rreq => "RREQ",
            PacketKind::Reply => "REPLY",
            PacketKind::Data => "DATA",
            PacketKind::RecoveryReq => "RECREQ",
            PacketKind::RecoveryReply => "RECREP",
            PacketKind::JoinReq => "JOINREQ",
            PacketKind::JoinReply => "JOINREP",
        }
    }
}

impl fmt::Display for PacketKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Packet {
    pub fn kind(&self) -> PacketKind {
        match self {
            Packet::Hello(_) => PacketKind::Hello,
            Packet::Rreq(_) => PacketKind::Rreq,
            Packet::Reply(_) => PacketKind::Reply,
            Packet::Data(_) => PacketKind::Data,
            Packet::RecoveryReq(_) => PacketKind::RecoveryReq,
            Packet::RecoveryReply(_) => PacketKind::RecoveryReply,
            Packet::JoinReq(_) => PacketKind::JoinReq,
            Packet::JoinReply(_) => PacketKind::JoinReply,
        }
    }

    /// Bits carried above the frame header.
    pub fn body_bits(&self) -> u64 {
        let n = |len: usize| len as u64;
        match self {
            Packet::Hello(_) => TAG + ID + 2 * WORD,
            Packet::Rreq(r) => {
                TAG + ID
                    + LEN
                    + n(r.rows.len()) * (2 * ID + 4 * WORD)
                    + LEN
                    + n(r.relay_neighbors.len()) * (ID + WORD)
            }
            Packet::Reply(r) => {
                TAG + ID
                    + LEN
                    + n(r.entries.len()) * (3 * ID + WORD)
                    + LEN
                    + n(r.fg_chain.len()) * ID
            }
            Packet::Data(d) => u64::from(d.payload_bytes) * 8,
            Packet::RecoveryReq(r) => {
                TAG + 2 * ID
                    + 2 * WORD
                    + LEN
                    + n(r.candidates.len()) * ID
                    + LEN
                    + n(r.sources.len()) * ID
                    + LEN
                    + n(r.via.len()) * ID
            }
            Packet::RecoveryReply(r) => {
                TAG + 3 * ID
                    + WORD
                    + LEN
                    + n(r.path_back.len()) * ID
                    + LEN
                    + n(r.sources.len()) * ID
            }
            Packet::JoinReq(_) => TAG + 2 * ID + 2 * WORD + AUTH,
            Packet::JoinReply(_) => TAG + 3 * ID + WORD,
        }
    }

    /// Total frame size including the fixed frame header.
    pub fn serialized_size(&self) -> u64 {
        FRAME_HEADER_BITS + self.body_bits()
    }

    /// Key fields for the trace, as space-separated `key=value` pairs.
    pub fn fields(&self) -> String {
        let mut s = String::new();
        match self {
            Packet::Hello(h) => {
                let _ = write!(s, "bavail={:.0} consumed={}", h.b_available, h.consumed_rate);
            }
            Packet::Rreq(r) => {
                let rows: Vec<String> = r
                    .rows
                    .iter()
                    .map(|w| format!("{}/{}/{}/h{}", w.source, w.group, w.seq, w.hop_count))
                    .collect();
                let _ = write!(s, "relay={} rows={}", r.relay, rows.join(","));
            }
            Packet::Reply(r) => {
                let e: Vec<String> = r
                    .entries
                    .iter()
                    .map(|e| format!("{}/{}/{}>{}", e.source, e.group, e.seq, e.next_node))
                    .collect();
                let _ = write!(s, "origin={} entries={} chain={}", r.origin, e.join(","), join_ids(&r.fg_chain));
            }
            Packet::Data(d) => {
                let _ = write!(s, "src={} grp={} seq={} sent={}", d.source, d.group, d.flow_seq, d.sent_at);
            }
            Packet::RecoveryReq(r) => {
                let _ = write!(
                    s,
                    "origin={} grp={} inst={} ttl={} cand={} via={}",
                    r.origin,
                    r.group,
                    r.instance,
                    r.ttl_hops,
                    join_ids(&r.candidates),
                    join_ids(&r.via)
                );
            }
            Packet::RecoveryReply(r) => {
                let _ = write!(
                    s,
                    "responder={} origin={} grp={} inst={} path={}",
                    r.responder,
                    r.origin,
                    r.group,
                    r.instance,
                    join_ids(&r.path_back)
                );
            }
            Packet::JoinReq(j) => {
                let _ = write!(s, "origin={} nonce={} ttl={}", j.origin_snode, j.nonce, j.ttl);
            }
            Packet::JoinReply(j) => {
                let _ = write!(s, "from={} to={} nonce={} via={}", j.from_snode, j.to_snode, j.nonce, j.via);
            }
        }
        s
    }
}

fn join_ids(ids: &[NodeId]) -> String {
    if ids.is_empty() {
        return "-".into();
    }
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Tx,
    Rx,
    Drop,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Tx => "tx",
            Direction::Rx => "rx",
            Direction::Drop => "drop",
        }
    }
}

/// One trace line: `time node dir peer kind fields...`.
///
/// `peer` is the sender for `rx`, `-` for `tx`, and the reason for `drop`.
pub fn trace_line(t: SimTime, node: NodeId, dir: Direction, peer: &str, packet: &Packet) -> String {
    format!(
        "{} {} {} {} {} {}",
        t,
        node,
        dir.as_str(),
        peer,
        packet.kind(),
        packet.fields()
    )
}
