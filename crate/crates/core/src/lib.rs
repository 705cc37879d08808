//! Chunk-level KV-cache management for retrieval-augmented generation.
//!
//! Retrieved chunks are prefilled once, their per-layer keys and values are
//! stored without rotary position information, and later requests that
//! retrieve the same chunk reuse the stored cache at a new position. Reuse
//! under a different prefix is repaired by recomputing the handful of tokens
//! that were most contextualized by the old prefix.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: a small deterministic transformer used both as the system
//!   under management and as the ground-truth oracle (plain prefill, partial
//!   prefill with injected caches, greedy decode).
//! - [`stats`]: inter/intra chunk attention aggregates and per-token
//!   contextualization scores.
//! - [`scoring`]: prefix overlap, order penalty, context impact and fix
//!   overhead scores, plus alpha calibration.
//! - [`planner`]: token selection, focused-chunk prediction and inference
//!   plans.
//! - [`store`]: the variant store with frequency-reuse eviction.
//! - [`tiers`]: discrete-event simulation of tiered cache placement and
//!   layer-wise preloading.
//! - [`harness`]: synthetic traces, end-to-end replay and reports.

pub mod error;
pub mod harness;
pub mod model;
pub mod planner;
pub mod scoring;
pub mod stats;
pub mod store;
pub mod tiers;

pub use error::{Error, Result};
