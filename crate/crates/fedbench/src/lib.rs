//! Desk-scale benchmarking harness for HTTP data-federation transfers.
//!
//! The crate bundles a deterministic payload generator, an embedded mock
//! federation (origin, pull-through cache, redirector, token auth, third-party
//! copy), a fixed-duration parallel-stream transfer engine, RTT probes, and
//! the statistics/reporting layer that turns sample logs into campaign
//! summaries.

pub mod datagen;
pub mod engine;
pub mod federation;
pub mod httpio;
pub mod matrix;
pub mod model;
pub mod probes;
pub mod report;
pub mod stats;
