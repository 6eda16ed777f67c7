//! Discrete-event simulator of transport-network slicing: a three-level
//! hierarchical token-bucket ingress policer with burst control, the
//! 5QI-aware reference model, a trTCM-per-flow reference model, and the
//! coarse-grained priority/DRR egress scheduling they feed.

pub mod config;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod policer;
pub mod presets;
pub mod sched;
