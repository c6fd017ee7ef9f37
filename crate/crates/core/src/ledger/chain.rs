//! Append-only hash chain of size-capped round records.

use crate::codec::{Reader, Writer};
use crate::crypto::{sha256, Hash32, NodeId};

use super::LedgerError;

/// Records must serialize strictly below 1 MB to be accepted on-chain.
pub const ON_CHAIN_CAP_BYTES: usize = 1 << 20;

/// Round metadata anchored on-chain: the heavy model bytes live off-chain
/// behind `model_root`.
#[derive(Debug, Clone, PartialEq)]
pub struct OnChainRecord {
    pub round: u64,
    pub model_root: Hash32,
    pub participants: Vec<NodeId>,
    /// Small named metrics (consensus kind, scores, winner ids, ...).
    pub summary: Vec<(String, f64)>,
    pub timestamp_ms: u64,
}

impl OnChainRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u64(self.round);
        w.put_hash(&self.model_root);
        w.put_u32(self.participants.len() as u32);
        for p in &self.participants {
            w.put_u64(*p);
        }
        w.put_u32(self.summary.len() as u32);
        for (key, value) in &self.summary {
            w.put_bytes(key.as_bytes());
            w.put_f64(*value);
        }
        w.put_u64(self.timestamp_ms);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LedgerError> {
        let mut r = Reader::new(bytes);
        let inner = (|| -> Result<Self, crate::codec::CodecError> {
            let round = r.u64()?;
            let model_root = r.hash()?;
            let n = r.u32()? as usize;
            let mut participants = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                participants.push(r.u64()?);
            }
            let k = r.u32()? as usize;
            let mut summary = Vec::with_capacity(k.min(1 << 16));
            for _ in 0..k {
                let key = String::from_utf8_lossy(r.bytes()?).into_owned();
                let value = r.f64()?;
                summary.push((key, value));
            }
            let timestamp_ms = r.u64()?;
            r.expect_end()?;
            Ok(OnChainRecord {
                round,
                model_root,
                participants,
                summary,
                timestamp_ms,
            })
        })();
        inner.map_err(|e| LedgerError::InvalidDump(e.to_string()))
    }

    pub fn serialized_len(&self) -> usize {
        self.encode().len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Hash32,
    pub payload: OnChainRecord,
    pub block_hash: Hash32,
}

fn block_hash(height: u64, prev_hash: &Hash32, payload_bytes: &[u8]) -> Hash32 {
    let mut w = Writer::new();
    w.put_u64(height);
    w.put_hash(prev_hash);
    w.put_raw(payload_bytes);
    sha256(&w.finish())
}

/// The ledger: heights increase by one from zero, each block binding the
/// previous block's hash.
#[derive(Debug, Clone, Default)]
pub struct Chain {
    blocks: Vec<Block>,
}

impl Chain {
    pub fn new() -> Self {
        Chain::default()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn tip_hash(&self) -> Hash32 {
        self.blocks
            .last()
            .map(|b| b.block_hash)
            .unwrap_or(Hash32::ZERO)
    }

    /// Append a record if it fits the on-chain cap.
    pub fn append_block(&mut self, record: OnChainRecord) -> Result<&Block, LedgerError> {
        let payload_bytes = record.encode();
        if payload_bytes.len() >= ON_CHAIN_CAP_BYTES {
            return Err(LedgerError::RecordTooLarge {
                size: payload_bytes.len(),
                cap: ON_CHAIN_CAP_BYTES,
            });
        }
        let height = self.blocks.len() as u64;
        let prev_hash = self.tip_hash();
        let hash = block_hash(height, &prev_hash, &payload_bytes);
        self.blocks.push(Block {
            height,
            prev_hash,
            payload: record,
            block_hash: hash,
        });
        Ok(self.blocks.last().unwrap())
    }

    /// Recompute every hash and link; false on any mismatch.
    pub fn verify(&self) -> bool {
        let mut prev = Hash32::ZERO;
        for (i, block) in self.blocks.iter().enumerate() {
            if block.height != i as u64 || block.prev_hash != prev {
                return false;
            }
            let payload_bytes = block.payload.encode();
            if payload_bytes.len() >= ON_CHAIN_CAP_BYTES {
                return false;
            }
            if block_hash(block.height, &block.prev_hash, &payload_bytes) != block.block_hash {
                return false;
            }
            prev = block.block_hash;
        }
        true
    }

    /// Hex-encoded length-prefixed block dump.
    pub fn dump_hex(&self) -> String {
        let mut w = Writer::new();
        for block in &self.blocks {
            let mut bw = Writer::new();
            bw.put_u64(block.height);
            bw.put_hash(&block.prev_hash);
            bw.put_bytes(&block.payload.encode());
            bw.put_hash(&block.block_hash);
            w.put_bytes(&bw.finish());
        }
        hex::encode(w.finish())
    }

    pub fn load_hex(dump: &str) -> Result<Self, LedgerError> {
        let raw = hex::decode(dump.trim())
            .map_err(|e| LedgerError::InvalidDump(format!("hex: {e}")))?;
        let mut outer = Reader::new(&raw);
        let mut blocks = Vec::new();
        while outer.remaining() > 0 {
            let block_bytes = outer
                .bytes()
                .map_err(|e| LedgerError::InvalidDump(e.to_string()))?;
            let mut r = Reader::new(block_bytes);
            let inner = (|| -> Result<Block, crate::codec::CodecError> {
                let height = r.u64()?;
                let prev_hash = r.hash()?;
                let payload_bytes = r.bytes()?;
                let payload = OnChainRecord::decode(payload_bytes)
                    .map_err(|e| crate::codec::CodecError::Invalid {
                        offset: 0,
                        reason: e.to_string(),
                    })?;
                let block_hash = r.hash()?;
                r.expect_end()?;
                Ok(Block {
                    height,
                    prev_hash,
                    payload,
                    block_hash,
                })
            })();
            blocks.push(inner.map_err(|e| LedgerError::InvalidDump(e.to_string()))?);
        }
        Ok(Chain { blocks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn record(round: u64) -> OnChainRecord {
        OnChainRecord {
            round,
            model_root: sha256(&round.to_be_bytes()),
            participants: vec![0, 1, 2],
            summary: vec![("score".into(), 0.5 + round as f64 / 100.0)],
            timestamp_ms: 1000 * round,
        }
    }

    #[test]
    fn record_roundtrip() {
        let rec = record(3);
        assert_eq!(OnChainRecord::decode(&rec.encode()).unwrap(), rec);
    }

    #[test]
    fn genesis_plus_one_verifies() {
        let mut chain = Chain::new();
        chain.append_block(record(0)).unwrap();
        chain.append_block(record(1)).unwrap();
        assert!(chain.verify());
        assert_eq!(chain.blocks()[1].prev_hash, chain.blocks()[0].block_hash);
    }

    #[test]
    fn payload_mutation_breaks_verification() {
        let mut chain = Chain::new();
        chain.append_block(record(0)).unwrap();
        chain.append_block(record(1)).unwrap();
        chain.blocks[1].payload.round = 42;
        assert!(!chain.verify());
    }

    // Mutation-sweep oracle: each single-field mutation at a random
    // height must break verification.
    #[test]
    fn mutation_sweep_fails_verification() {
        let mut chain = Chain::new();
        for r in 0..100 {
            chain.append_block(record(r)).unwrap();
        }
        assert!(chain.verify());

        let mut rng = crate::crypto::seeded_rng(77, 0, "mutate");
        for field in 0..5 {
            for _ in 0..8 {
                let mut mutated = chain.clone();
                let h = rng.gen_range(0..100usize);
                match field {
                    0 => mutated.blocks[h].payload.round ^= 1,
                    1 => mutated.blocks[h].payload.model_root.0[0] ^= 1,
                    2 => mutated.blocks[h].payload.timestamp_ms ^= 1,
                    3 => mutated.blocks[h].prev_hash.0[31] ^= 1,
                    4 => mutated.blocks[h].block_hash.0[5] ^= 1,
                    _ => unreachable!(),
                }
                assert!(!mutated.verify(), "field {field} at height {h}");
            }
        }
    }

    #[test]
    fn cap_is_strict() {
        let mut base = record(0);
        base.participants.clear();
        base.summary.clear();
        let overhead = base.serialized_len();
        // One summary entry adds 4 (len) + key + 8 (value) bytes.
        let filler = |key_len: usize| {
            let mut rec = base.clone();
            rec.summary.push(("x".repeat(key_len), 0.0));
            rec
        };
        let at_cap = filler(ON_CHAIN_CAP_BYTES - overhead - 12);
        assert_eq!(at_cap.serialized_len(), ON_CHAIN_CAP_BYTES);
        let under_cap = filler(ON_CHAIN_CAP_BYTES - overhead - 13);
        assert_eq!(under_cap.serialized_len(), ON_CHAIN_CAP_BYTES - 1);

        let mut chain = Chain::new();
        assert_eq!(
            chain.append_block(at_cap).unwrap_err(),
            LedgerError::RecordTooLarge {
                size: ON_CHAIN_CAP_BYTES,
                cap: ON_CHAIN_CAP_BYTES
            }
        );
        chain.append_block(under_cap).unwrap();
        assert!(chain.verify());
    }

    #[test]
    fn dump_roundtrip_preserves_chain() {
        let mut chain = Chain::new();
        for r in 0..5 {
            chain.append_block(record(r)).unwrap();
        }
        let dump = chain.dump_hex();
        let loaded = Chain::load_hex(&dump).unwrap();
        assert!(loaded.verify());
        assert_eq!(loaded.blocks(), chain.blocks());
        assert_eq!(loaded.dump_hex(), dump);
    }

    #[test]
    fn corrupt_dump_detected() {
        let mut chain = Chain::new();
        chain.append_block(record(0)).unwrap();
        let mut dump = chain.dump_hex();
        // Flip a hex digit inside the payload region.
        let mid = dump.len() / 2;
        let orig = dump.as_bytes()[mid];
        let repl = if orig == b'0' { b'1' } else { b'0' };
        dump.replace_range(mid..mid + 1, std::str::from_utf8(&[repl]).unwrap());
        match Chain::load_hex(&dump) {
            Ok(loaded) => assert!(!loaded.verify()),
            Err(LedgerError::InvalidDump(_)) => {}
            Err(e) => panic!("unexpected error {e:?}"),
        }
    }
}
