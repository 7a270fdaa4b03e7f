//! Deterministic discrete-time simulator for predictive account allocation in
//! sharded BFT blockchains.
//!
//! The control loop run by every validator each block is:
//! forecast per-shard load ([`twf`]), propose account moves with a
//! constrained PPO policy ([`allocator`]), prune the proposal with a
//! deterministic [`safety`] gate, then commit the survivors as an
//! authenticated batch with timeout rollback ([`migration`]). [`sim`] drives
//! that loop over synthetic or replayed traces ([`workload`]) and [`report`]
//! turns the resulting block records into summary statistics.

pub mod allocator;
pub mod checkpoint;
pub mod error;
pub mod fixed;
pub mod hash;
pub mod metrics;
pub mod migration;
pub mod pipeline;
pub mod report;
pub mod safety;
pub mod scenario;
pub mod sim;
pub mod twf;
pub mod types;
pub mod workload;

pub use error::{Error, Result};
pub use fixed::FixedPoint;
pub use types::{
    AccountId, AllocationMap, BlockHeight, EpochId, LoadVector, MigrationAction, Move, ShardId, ShardState, Transaction,
};
