//! Orchestration core: snapshot-pinned market data, agent crews with pluggable
//! backends, the five-stage selection pipeline, human review checkpoints and the
//! weekly evaluation harness.

pub mod agents;
pub mod config;
pub mod evaluation;
pub mod fsutil;
pub mod hitl;
pub mod market_data;
pub mod net;
pub mod pipeline;
pub mod run;
pub mod sentiment;
pub mod synthetic;

pub use equicrew_quant as quant;
