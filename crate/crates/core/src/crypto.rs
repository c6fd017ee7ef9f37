//! Hashing, node identity, and in-process signing.
//!
//! Signatures are 32-byte MACs derived from a per-node secret held in a
//! [`KeyStore`] registry. Verification recomputes the MAC, so a node can
//! re-sign anything with its own key but cannot produce a signature that
//! verifies under another node's identity. This stands in for public-key
//! signatures; the wire formats reserve exactly 32 bytes for it.

use std::fmt;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Node identifier used across the simulator (trainers, aggregators, miners).
pub type NodeId = u64;

/// A 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash32(pub [u8; 32]);

impl Hash32 {
    pub const ZERO: Hash32 = Hash32([0u8; 32]);

    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let bytes = hex::decode(s)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| hex::FromHexError::InvalidStringLength)?;
        Ok(Hash32(arr))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash32({}..)", &self.to_hex()[..8])
    }
}

impl fmt::Display for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn sha256(data: &[u8]) -> Hash32 {
    let mut hasher = Sha256::new();
    hasher.update(data);
    Hash32(hasher.finalize().into())
}

/// Hash a sequence of parts as if concatenated.
pub fn sha256_parts(parts: &[&[u8]]) -> Hash32 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    Hash32(hasher.finalize().into())
}

/// A 32-byte signature (see module docs for the trust model).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Signature(pub [u8; 32]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..4]))
    }
}

/// Registry of per-node signing secrets, all derived from one root seed.
#[derive(Clone)]
pub struct KeyStore {
    root: [u8; 32],
}

impl KeyStore {
    pub fn new(seed: u64) -> Self {
        let root = sha256_parts(&[b"keystore-root", &seed.to_be_bytes()]);
        KeyStore { root: root.0 }
    }

    fn secret(&self, node: NodeId) -> [u8; 32] {
        sha256_parts(&[&self.root, b"node-secret", &node.to_be_bytes()]).0
    }

    /// Public fingerprint of a node's key, used in audit records.
    pub fn fingerprint(&self, node: NodeId) -> Hash32 {
        sha256_parts(&[b"fingerprint", &self.secret(node)])
    }

    pub fn sign(&self, node: NodeId, message: &[u8]) -> Signature {
        Signature(sha256_parts(&[&self.secret(node), message]).0)
    }

    pub fn verify(&self, node: NodeId, message: &[u8], signature: &Signature) -> bool {
        self.sign(node, message) == *signature
    }
}

/// Derive an independent ChaCha stream from (seed, node, purpose).
///
/// Hashing the tuple means adding or removing a node never perturbs any
/// other node's stream, and each purpose ("net", "train", ...) draws from
/// its own sequence.
pub fn seeded_rng(seed: u64, node: NodeId, purpose: &str) -> ChaCha8Rng {
    let digest = sha256_parts(&[
        b"stream",
        &seed.to_be_bytes(),
        &node.to_be_bytes(),
        purpose.as_bytes(),
    ]);
    ChaCha8Rng::from_seed(digest.0)
}

/// A single derived 64-bit value from the same keyed-hash scheme.
pub fn derive_u64(seed: u64, node: NodeId, purpose: &str) -> u64 {
    let digest = sha256_parts(&[
        b"value",
        &seed.to_be_bytes(),
        &node.to_be_bytes(),
        purpose.as_bytes(),
    ]);
    u64::from_be_bytes(digest.0[..8].try_into().unwrap())
}
