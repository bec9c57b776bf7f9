//! s-node group mesh formation.
//!
//! s-nodes flood an authenticated, TTL-scoped JoinReq. Another s-node that
//! receives it answers toward the delivering neighbor; the answer walks the
//! recorded reverse path back to the originator and every node it crosses
//! sets its forwarding attribute.
//!
//! The authenticator is a keyed hash standing in for certificate checks.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::wire::{JoinReply, JoinReq, NodeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecurityParams {
    pub enabled: bool,
    pub snodes: Vec<NodeId>,
    pub join_ttl: u32,
    pub auth_key: String,
    /// Node that injects JoinReqs carrying a bad authenticator.
    pub attacker: Option<NodeId>,
    pub forged_joins: u32,
    /// s-nodes start their join uniformly within this many seconds.
    pub join_window: f64,
}

impl Default for SecurityParams {
    fn default() -> Self {
        SecurityParams {
            enabled: false,
            snodes: Vec::new(),
            join_ttl: 10,
            auth_key: "meshcast-network-key".into(),
            attacker: None,
            forged_joins: 0,
            join_window: 0.5,
        }
    }
}

impl SecurityParams {
    pub fn validate(&self, nodes: usize) -> Result<(), String> {
        if self.join_ttl == 0 {
            return Err("security.join_ttl must be at least 1".into());
        }
        let set: BTreeSet<NodeId> = self.snodes.iter().copied().collect();
        if set.len() != self.snodes.len() {
            return Err("security.snodes contains duplicates".into());
        }
        if let Some(&bad) = self.snodes.iter().find(|&&n| n as usize >= nodes) {
            return Err(format!("security.snodes: node {bad} out of range"));
        }
        if let Some(a) = self.attacker {
            if a as usize >= nodes {
                return Err(format!("security.attacker: node {a} out of range"));
            }
        }
        if self.forged_joins > 0 && self.attacker.is_none() {
            return Err("security.forged_joins requires security.attacker".into());
        }
        if !(self.join_window.is_finite() && self.join_window >= 0.0) {
            return Err("security.join_window must be non-negative".into());
        }
        Ok(())
    }

    pub fn is_snode(&self, n: NodeId) -> bool {
        self.snodes.contains(&n)
    }
}

/// First eight bytes of SHA-256(key ‖ origin ‖ nonce), big-endian.
pub fn authenticator(key: &str, origin: NodeId, nonce: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(key.as_bytes());
    h.update(origin.to_be_bytes());
    h.update(nonce.to_be_bytes());
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn verify(key: &str, req: &JoinReq) -> bool {
    authenticator(key, req.origin_snode, req.nonce) == req.auth
}

#[derive(Debug, Clone, PartialEq)]
pub enum JoinAction {
    Relay(JoinReq),
    Reply(JoinReply),
    Drop,
    Rejected,
}

#[derive(Debug, Default)]
pub struct SecurityState {
    pub forwarding_attr: bool,
    seen: HashSet<(NodeId, u32)>,
    reverse_routes: HashMap<(NodeId, u32), NodeId>,
    next_nonce: u32,
    pub rejected_auth: u64,
}

impl SecurityState {
    pub fn start_join(&mut self, p: &SecurityParams, me: NodeId) -> JoinReq {
        self.next_nonce += 1;
        let nonce = self.next_nonce;
        self.seen.insert((me, nonce));
        JoinReq {
            origin_snode: me,
            nonce,
            ttl: p.join_ttl,
            auth: authenticator(&p.auth_key, me, nonce),
            reverse_path_hint: me,
        }
    }

    /// `from` is the neighbor whose transmission delivered `req`.
    pub fn process_join_req(&mut self, p: &SecurityParams, me: NodeId, req: &JoinReq, from: NodeId) -> JoinAction {
        if !verify(&p.auth_key, req) {
            self.rejected_auth += 1;
            return JoinAction::Rejected;
        }
        if !self.seen.insert((req.origin_snode, req.nonce)) {
            return JoinAction::Drop;
        }
        if p.is_snode(me) {
            return JoinAction::Reply(JoinReply {
                from_snode: me,
                to_snode: req.origin_snode,
                nonce: req.nonce,
                via: from,
            });
        }
        self.reverse_routes.insert((req.origin_snode, req.nonce), from);
        if req.ttl > 1 {
            return JoinAction::Relay(JoinReq {
                ttl: req.ttl - 1,
                reverse_path_hint: me,
                ..req.clone()
            });
        }
        JoinAction::Drop
    }

    /// Returns the reply to pass on, if any.
    pub fn process_join_reply(&mut self, me: NodeId, reply: &JoinReply) -> Option<JoinReply> {
        if reply.via != me || reply.to_snode == me {
            return None;
        }
        let prev = *self.reverse_routes.get(&(reply.to_snode, reply.nonce))?;
        self.forwarding_attr = true;
        Some(JoinReply {
            via: prev,
            ..reply.clone()
        })
    }
}

fn hop_distances(adj: &BTreeMap<NodeId, Vec<NodeId>>, from: NodeId) -> BTreeMap<NodeId, u32> {
    let mut dist = BTreeMap::new();
    dist.insert(from, 0);
    let mut q = VecDeque::from([from]);
    while let Some(u) = q.pop_front() {
        let d = dist[&u];
        for &v in adj.get(&u).into_iter().flatten() {
            if !dist.contains_key(&v) {
                dist.insert(v, d + 1);
                q.push_back(v);
            }
        }
    }
    dist
}

/// True iff every pair of s-nodes within `join_ttl` hops is joined by a path
/// whose interior nodes are all marked or are themselves s-nodes.
pub fn mesh_formed(
    snodes: &[NodeId],
    join_ttl: u32,
    adj: &BTreeMap<NodeId, Vec<NodeId>>,
    marked: &BTreeSet<NodeId>,
) -> bool {
    let s: BTreeSet<NodeId> = snodes.iter().copied().collect();
    let pass: BTreeSet<NodeId> = marked.union(&s).copied().collect();
    let restricted: BTreeMap<NodeId, Vec<NodeId>> = adj
        .iter()
        .map(|(&u, vs)| {
            let vs = if pass.contains(&u) {
                vs.clone()
            } else {
                Vec::new()
            };
            (u, vs)
        })
        .collect();
    for &a in &s {
        let near = hop_distances(adj, a);
        let reach = hop_distances(&restricted, a);
        for &b in &s {
            if b > a && near.get(&b).is_some_and(|&d| d <= join_ttl) && !reach.contains_key(&b) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(snodes: Vec<NodeId>, ttl: u32) -> SecurityParams {
        SecurityParams {
            enabled: true,
            snodes,
            join_ttl: ttl,
            ..SecurityParams::default()
        }
    }

    #[test]
    fn join_carries_ttl_and_valid_auth() {
        let p = params(vec![0, 2], 10);
        let mut s = SecurityState::default();
        let j = s.start_join(&p, 0);
        assert_eq!(j.ttl, 10);
        assert!(verify(&p.auth_key, &j));
    }

    #[test]
    fn relay_decrements_and_stops_at_one() {
        let p = params(vec![0, 9], 10);
        let mut b = SecurityState::default();
        let j = SecurityState::default().start_join(&p, 0);
        let JoinAction::Relay(r) = b.process_join_req(&p, 1, &j, 0) else {
            panic!()
        };
        assert_eq!(r.ttl, 9);
        let mut c = SecurityState::default();
        let last = JoinReq { ttl: 1, ..r };
        assert_eq!(c.process_join_req(&p, 2, &last, 1), JoinAction::Drop);
    }

    #[test]
    fn tampered_auth_rejected() {
        let p = params(vec![0, 2], 10);
        let mut b = SecurityState::default();
        let mut j = SecurityState::default().start_join(&p, 0);
        j.auth ^= 1;
        assert_eq!(b.process_join_req(&p, 1, &j, 0), JoinAction::Rejected);
        assert_eq!(b.rejected_auth, 1);
        // an s-node must not answer it either
        let mut s2 = SecurityState::default();
        assert_eq!(s2.process_join_req(&p, 2, &j, 1), JoinAction::Rejected);
    }

    #[test]
    fn duplicate_relayed_once() {
        let p = params(vec![0, 9], 10);
        let mut b = SecurityState::default();
        let j = SecurityState::default().start_join(&p, 0);
        assert!(matches!(b.process_join_req(&p, 1, &j, 0), JoinAction::Relay(_)));
        assert_eq!(b.process_join_req(&p, 1, &j, 5), JoinAction::Drop);
    }

    /// S1(0) - B(1) - S2(2)
    #[test]
    fn three_node_line_marks_middle() {
        let p = params(vec![0, 2], 10);
        let mut s1 = SecurityState::default();
        let mut b = SecurityState::default();
        let mut s2 = SecurityState::default();
        let j = s1.start_join(&p, 0);
        let JoinAction::Relay(r) = b.process_join_req(&p, 1, &j, 0) else {
            panic!()
        };
        let JoinAction::Reply(rep) = s2.process_join_req(&p, 2, &r, 1) else {
            panic!()
        };
        assert_eq!(rep.via, 1);
        let back = b.process_join_reply(1, &rep).unwrap();
        assert!(b.forwarding_attr);
        assert_eq!(back.via, 0);
        assert!(s1.process_join_reply(0, &back).is_none());
        assert!(!s1.forwarding_attr);
    }

    #[test]
    fn reply_without_reverse_route_dropped() {
        let mut n = SecurityState::default();
        let rep = JoinReply { from_snode: 2, to_snode: 0, nonce: 1, via: 4 };
        assert!(n.process_join_reply(4, &rep).is_none());
        assert!(!n.forwarding_attr);
    }

    fn line(n: u32) -> BTreeMap<NodeId, Vec<NodeId>> {
        (0..n)
            .map(|i| {
                let mut v = vec![];
                if i > 0 {
                    v.push(i - 1);
                }
                if i + 1 < n {
                    v.push(i + 1);
                }
                (i, v)
            })
            .collect()
    }

    #[test]
    fn mesh_predicate() {
        let adj = line(4);
        assert!(mesh_formed(&[0, 1], 10, &adj, &BTreeSet::new()));
        assert!(!mesh_formed(&[0, 3], 10, &adj, &BTreeSet::from([1])));
        assert!(mesh_formed(&[0, 3], 10, &adj, &BTreeSet::from([1, 2])));
        // too far apart: excluded
        assert!(mesh_formed(&[0, 3], 2, &adj, &BTreeSet::new()));
        // interior s-node passes
        assert!(mesh_formed(&[0, 2, 3], 10, &adj, &BTreeSet::from([1])));
    }
}
