//! Content-addressed off-chain store with simulated replica failures.
//!
//! Addresses are the Merkle root of the content's 4 KiB chunking (the
//! same function that anchors models on-chain), so the address doubles
//! as the integrity proof: `get` re-derives the root before returning.

use std::collections::BTreeMap;

use crate::crypto::Hash32;

use super::merkle::{chunk_content, merkle_root, DEFAULT_CHUNK_BYTES};
use super::LedgerError;

#[derive(Debug, Clone, Copy)]
pub struct DhtConfig {
    pub replicas: usize,
    pub chunk_bytes: usize,
}

impl Default for DhtConfig {
    fn default() -> Self {
        DhtConfig {
            replicas: 3,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    content: Vec<u8>,
    replica_alive: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Dht {
    cfg: DhtConfig,
    entries: BTreeMap<Hash32, Entry>,
}

impl Dht {
    pub fn new(cfg: DhtConfig) -> Self {
        Dht {
            cfg,
            entries: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> DhtConfig {
        self.cfg
    }

    /// Derive the address content would be stored under.
    pub fn address_of(&self, content: &[u8]) -> Result<Hash32, LedgerError> {
        let chunked = chunk_content(content, self.cfg.chunk_bytes)?;
        merkle_root(&chunked.chunks)
    }

    /// Store content under its derived address. Re-putting existing
    /// content refreshes all replicas.
    pub fn put(&mut self, content: Vec<u8>) -> Result<Hash32, LedgerError> {
        let address = self.address_of(&content)?;
        let replicas = self.cfg.replicas.max(1);
        self.entries.insert(
            address,
            Entry {
                content,
                replica_alive: vec![true; replicas],
            },
        );
        Ok(address)
    }

    /// Fetch and integrity-check content. Fails as unavailable when no
    /// replica is alive and as corrupted when the stored bytes no longer
    /// hash to the address.
    pub fn get(&self, address: &Hash32) -> Result<&[u8], LedgerError> {
        let entry = self
            .entries
            .get(address)
            .ok_or(LedgerError::Unavailable { address: *address })?;
        if !entry.replica_alive.iter().any(|&alive| alive) {
            return Err(LedgerError::Unavailable { address: *address });
        }
        let recomputed = self.address_of(&entry.content)?;
        if recomputed != *address {
            return Err(LedgerError::Corrupted { address: *address });
        }
        Ok(&entry.content)
    }

    /// Scripted failure of one replica. Returns false for unknown
    /// addresses or replica indices.
    pub fn fail_replica(&mut self, address: &Hash32, replica: usize) -> bool {
        match self.entries.get_mut(address) {
            Some(entry) if replica < entry.replica_alive.len() => {
                entry.replica_alive[replica] = false;
                true
            }
            _ => false,
        }
    }

    pub fn live_replicas(&self, address: &Hash32) -> usize {
        self.entries
            .get(address)
            .map(|e| e.replica_alive.iter().filter(|&&a| a).count())
            .unwrap_or(0)
    }

    /// Test hook simulating bit rot in the stored bytes.
    pub fn corrupt(&mut self, address: &Hash32, byte: usize, mask: u8) -> bool {
        match self.entries.get_mut(address) {
            Some(entry) if byte < entry.content.len() => {
                entry.content[byte] ^= mask;
                true
            }
            _ => false,
        }
    }
}
