//! Desk-scale, fully deterministic simulator of peer-to-peer decentralized
//! learning (gossip-averaged SGD) and cross-silo federated averaging,
//! together with the privacy attacks and defenses that operate on the
//! exchanged model updates.

pub mod adversary;
pub mod data;
pub mod defenses;
pub mod harness;
pub mod models;
pub mod numkit;
pub mod protocol;
pub mod topology;
