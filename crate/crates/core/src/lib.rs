//! Core library for a deterministic, seedable simulator of a zone-based
//! on-demand shuttle service.
//!
//! The simulator batches trip requests into fixed-length epochs, assigns
//! shuttles to candidate routes through an exact set-partitioning master
//! problem with escalating penalties for unserved requests, and rebalances
//! idle shuttles toward recent demand with a two-stage allocation/assignment
//! controller. Four shuttle functionality levels (SFL I-IV) span human
//! drivers with sampled response delays up to autonomous shuttles with
//! mid-leg re-routing and relocatable idle stops.
//!
//! Everything is a pure function of (inputs, seed): running the same
//! scenario twice produces byte-identical event logs and reports.

pub mod demand;
pub mod dispatch;
pub mod engine;
pub mod metrics;
pub mod network;
pub mod rebalance;
pub mod routing;
pub mod scenario;
pub mod synth;

mod assignment;
mod ids;
mod params;
mod rngutil;

pub use ids::{RequestId, ShuttleId, StopId, UserId};
pub use params::{CostDenominator, Sfl, SimParams};
pub use rngutil::derive_seed;
