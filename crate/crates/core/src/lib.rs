//! Elastic object pools on a simulated cluster.
//!
//! A pool of worker objects presents one logical remote endpoint. Pools grow
//! and shrink under a pluggable scaling policy, share state through a
//! strongly consistent store with named locks, and balance load between a
//! client-side stub and a sentinel-coordinated redistribution step. The
//! whole system runs on a deterministic virtual clock so that every run is
//! replayable from its seed.

pub mod balancer;
pub mod bench;
pub mod cache;
pub mod clock;
pub mod cluster;
pub mod events;
pub mod ids;
pub mod pool;
pub mod scenario;
pub mod scaling;
pub mod sim;
pub mod store;
