//! Multi-tier storage: on-chain ledger, Merkle model integrity,
//! content-addressed off-chain store, cache, and audit trail.
//!
//! The chain holds size-capped metadata records whose `model_root`
//! anchors the full model bytes living in the [`dht`] tier; the root is
//! both the integrity proof and the storage address, so fetching a
//! committed model and re-deriving its Merkle root closes the loop back
//! to the chain.

mod audit;
mod cache;
mod chain;
mod dht;
mod merkle;

pub use audit::{AuditLog, RoundAuditRecord};
pub use cache::ModelCache;
pub use chain::{Block, Chain, OnChainRecord, ON_CHAIN_CAP_BYTES};
pub use dht::{Dht, DhtConfig};
pub use merkle::{
    chunk_content, chunk_model, merkle_root, verify_proof, ChunkedContent, MerkleProof,
    MerkleTree, ProofStep, DEFAULT_CHUNK_BYTES, MIN_CHUNK_BYTES,
};

use thiserror::Error;

use crate::crypto::Hash32;

#[derive(Debug, Error, PartialEq)]
pub enum LedgerError {
    #[error("chunk size {got} below minimum {min}")]
    ChunkTooSmall { got: usize, min: usize },
    #[error("cannot build a Merkle tree over zero chunks")]
    EmptyChunks,
    #[error("chunk index {index} out of range for {leaves} leaves")]
    IndexOutOfRange { index: usize, leaves: usize },
    #[error("record serializes to {size} bytes, at or above the {cap} byte on-chain cap")]
    RecordTooLarge { size: usize, cap: usize },
    #[error("content at {address} unavailable (no live replica)")]
    Unavailable { address: Hash32 },
    #[error("content at {address} failed integrity verification")]
    Corrupted { address: Hash32 },
    #[error("audit round {got} must exceed previous round {last}")]
    NonMonotonicRound { last: u64, got: u64 },
    #[error("invalid chain dump: {0}")]
    InvalidDump(String),
}
