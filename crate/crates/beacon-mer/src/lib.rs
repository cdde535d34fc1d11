//! Consensus-layer reward engine, seeded chain simulator, and reward-ledger analytics.
//!
//! The crate is organised as a pipeline:
//!
//! * [`rewards`]: exact integer reward arithmetic (base, flag, attestation,
//!   sync, proposer, slashing, execution-layer tips) in Gwei.
//! * [`sim`]: a deterministic, seeded desk-scale chain simulator emitting one
//!   state snapshot per slot.
//! * [`snapshot`] / [`source`]: the snapshot schema and the pluggable state
//!   providers (in-process simulation, fixture directory, HTTP + bundled mock
//!   server).
//! * [`entities`]: deposit-address to operator-entity mapping.
//! * [`analyzer`]: turns a stream of end-of-epoch states into a per-validator
//!   per-epoch reward ledger with conservation and dominance audits.
//! * [`metrics`]: the report layer (participation series, reward
//!   decomposition, proposal statistics, entity aggregates).
//! * [`cli`]: run configuration and the `simulate`/`analyze`/`report`/`full`
//!   subcommands used by the thin binary.
//!
//! Start with the `examples/` directory: each example is a runnable tour of
//! one capability.

pub mod analyzer;
pub mod cli;
pub mod entities;
pub mod metrics;
pub mod rewards;
pub mod sim;
pub mod snapshot;
pub mod source;

pub use rewards::{Gwei, GweiDelta};
