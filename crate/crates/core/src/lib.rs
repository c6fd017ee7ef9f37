//! Deterministic simulator for blockchain-coordinated federated learning.
//!
//! The crate wires four layers together:
//!
//! - [`simnet`]: a discrete-event scheduler and lossy network; everything
//!   downstream runs inside its single-threaded event loop.
//! - [`learning`]: a small perceptron with real training, evaluation,
//!   non-IID partitioning, and exact weighted aggregation.
//! - [`consensus`]: three commit protocols over the same training signals
//!   (quality-ranked leader election, loss-eased mining, and three-phase
//!   Byzantine agreement).
//! - [`ledger`]: the hash chain, Merkle model integrity, content-addressed
//!   off-chain store, cache, and audit trail that anchor each round.
//!
//! [`topology`] routes rounds over centralized, hierarchical, or
//! decentralized coordination structures, [`trust`] gates admission and
//! scripts adversaries, and [`harness`] turns a config file into a full,
//! reproducible experiment.
//!
//! Every source of randomness is a ChaCha stream derived by hashing
//! (seed, node, purpose), so a run is a pure function of its config.

pub mod codec;
pub mod consensus;
pub mod crypto;
pub mod harness;
pub mod learning;
pub mod ledger;
pub mod simnet;
pub mod topology;
pub mod trust;
