//! Training-free redundancy analysis for visual tokens in a decoder-only
//! multimodal transformer.
//!
//! The crate bundles a small f64 decoder ([`model`]), two per-token
//! computation reductions and a FastV-style pruning step ([`reductions`]),
//! a greedy layer ranking search ([`ranker`]), analytic FLOPs accounting
//! ([`flops`]) and the `lens` command line ([`cli`]).

pub mod cli;
pub mod demo;
pub mod flops;
mod fsutil;
pub mod model;
pub mod numkernel;
pub mod ranker;
pub mod reductions;

pub use fsutil::write_atomic;
