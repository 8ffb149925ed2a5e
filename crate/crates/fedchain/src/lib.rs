//! fedchain is a deterministic simulator for privacy-preserving federated
//! training: clients train local neural networks, discretize and noise their
//! weight updates, encrypt them under exponential ElGamal, and submit them for
//! homomorphic aggregation; every submission is hashed onto a proof-of-work
//! audit ledger guarded by a simulated smart-contract registry.
//!
//! The pieces compose bottom-up:
//!
//! - [`crypto`] — the safe-prime group, exponential ElGamal, bounded
//!   discrete-log recovery, and the quantize/noise/encrypt update pipeline.
//! - [`nn`] — a from-scratch tensor and layer engine (dense, convolution,
//!   max-pool, batch-norm) with exact backpropagation and SGD.
//! - [`data`] — IDX dataset ingestion, synthetic digit generation, splits,
//!   and per-client shards.
//! - [`ledger`] — the contract registry, SHA-256 transaction pool,
//!   proof-of-work mining, and chain verification.
//! - [`federation`] — the KGC/server/client round driver tying it together.
//! - [`cli`] — the `fedchain` binary's subcommands.
//!
//! Every run is reproducible: all randomness flows from one seed through
//! labelled [`rng`] streams, timestamps are logical counters, and two runs
//! with the same seed produce byte-identical outputs.

pub mod cli;
pub mod crypto;
pub mod data;
pub mod federation;
pub mod ledger;
pub mod nn;
pub mod rng;

#[cfg(doctest)]
mod guide;
