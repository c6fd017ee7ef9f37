//! Bounded LRU cache of materialized models, keyed by Merkle root.
//!
//! Commit handling invalidates the superseded global model's entry so a
//! stale model can never be served after the chain has moved on; misses
//! fall through to the DHT at the call site.

use crate::crypto::Hash32;
use crate::learning::ModelParams;

#[derive(Debug)]
pub struct ModelCache {
    capacity: usize,
    /// Most recently used at the back.
    entries: Vec<(Hash32, ModelParams)>,
    lookups: u64,
    misses: u64,
}

impl ModelCache {
    pub fn new(capacity: usize) -> Self {
        ModelCache {
            capacity: capacity.max(1),
            entries: Vec::new(),
            lookups: 0,
            misses: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, root: &Hash32) -> bool {
        self.entries.iter().any(|(r, _)| r == root)
    }

    pub fn put(&mut self, root: Hash32, params: ModelParams) {
        if let Some(pos) = self.entries.iter().position(|(r, _)| *r == root) {
            self.entries.remove(pos);
        }
        self.entries.push((root, params));
        while self.entries.len() > self.capacity {
            self.entries.remove(0);
        }
    }

    pub fn get(&mut self, root: &Hash32) -> Option<&ModelParams> {
        self.lookups += 1;
        match self.entries.iter().position(|(r, _)| r == root) {
            Some(pos) => {
                let entry = self.entries.remove(pos);
                self.entries.push(entry);
                Some(&self.entries.last().unwrap().1)
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    /// Drop the entry for a superseded model, if present.
    pub fn invalidate(&mut self, root: &Hash32) -> bool {
        match self.entries.iter().position(|(r, _)| r == root) {
            Some(pos) => {
                self.entries.remove(pos);
                true
            }
            None => false,
        }
    }

    pub fn lookups(&self) -> u64 {
        self.lookups
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn hit_rate(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            (self.lookups - self.misses) as f64 / self.lookups as f64
        }
    }
}
