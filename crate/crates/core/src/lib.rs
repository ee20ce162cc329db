//! Core library: provenance manifests, policy gates, evidence selection,
//! decision engine, receipts, revocation, and risk statistics.

pub mod canon;
pub mod clock;
pub mod engine;
pub mod graph;
pub mod hash;
pub mod keys;
pub mod krn;
pub mod manifest;
pub mod mses;
pub mod policy;
pub mod receipt;
pub mod sim;
pub mod stats;
