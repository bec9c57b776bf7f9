//! Packet-level discrete-event simulator for QoS-aware mesh multicast
//! routing in mobile ad-hoc networks.

pub mod engine;
pub mod medium;
pub mod metrics;
pub mod mobility;
pub mod protocol;
pub mod recovery;
pub mod scenario;
pub mod security;
pub mod wire;
pub mod sim;
pub mod harness;
