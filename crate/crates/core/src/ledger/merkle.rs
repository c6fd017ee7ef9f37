//! Chunking and Merkle trees over canonical model bytes.
//!
//! Leaves hash with a 0x00 domain prefix and internal nodes with 0x01,
//! so a leaf can never be reinterpreted as an internal node. A level's
//! odd trailing node is promoted unchanged to the next level.

use crate::crypto::{sha256_parts, Hash32};
use crate::learning::ModelParams;

use super::LedgerError;

pub const MIN_CHUNK_BYTES: usize = 64;
pub const DEFAULT_CHUNK_BYTES: usize = 4096;

/// Fixed-size chunks over a byte string, with the true length recorded
/// so reassembly can strip the zero padding of the last chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkedContent {
    pub chunks: Vec<Vec<u8>>,
    pub content_len: usize,
    pub chunk_bytes: usize,
}

impl ChunkedContent {
    pub fn reassemble(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.content_len);
        for chunk in &self.chunks {
            out.extend_from_slice(chunk);
        }
        out.truncate(self.content_len);
        out
    }
}

/// Split raw content into ceil(len / chunk_bytes) zero-padded chunks.
pub fn chunk_content(content: &[u8], chunk_bytes: usize) -> Result<ChunkedContent, LedgerError> {
    if chunk_bytes < MIN_CHUNK_BYTES {
        return Err(LedgerError::ChunkTooSmall {
            got: chunk_bytes,
            min: MIN_CHUNK_BYTES,
        });
    }
    let mut chunks = Vec::with_capacity(content.len().div_ceil(chunk_bytes).max(1));
    if content.is_empty() {
        chunks.push(vec![0u8; chunk_bytes]);
    } else {
        for piece in content.chunks(chunk_bytes) {
            let mut chunk = piece.to_vec();
            chunk.resize(chunk_bytes, 0);
            chunks.push(chunk);
        }
    }
    Ok(ChunkedContent {
        chunks,
        content_len: content.len(),
        chunk_bytes,
    })
}

/// Chunk a model's canonical serialization (layer order, row-major,
/// big-endian doubles).
pub fn chunk_model(params: &ModelParams, chunk_bytes: usize) -> Result<ChunkedContent, LedgerError> {
    chunk_content(&params.to_canonical_bytes(), chunk_bytes)
}

fn leaf_hash(chunk: &[u8]) -> Hash32 {
    sha256_parts(&[&[0x00], chunk])
}

fn node_hash(left: &Hash32, right: &Hash32) -> Hash32 {
    sha256_parts(&[&[0x01], &left.0, &right.0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProofStep {
    pub sibling: Hash32,
    /// True when the sibling is the left input of the parent hash.
    pub sibling_on_left: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleProof {
    pub leaf_index: usize,
    pub path: Vec<ProofStep>,
}

/// Hash tree over chunks; `levels[0]` holds the leaf hashes.
#[derive(Debug, Clone)]
pub struct MerkleTree {
    levels: Vec<Vec<Hash32>>,
}

impl MerkleTree {
    pub fn from_chunks(chunks: &[Vec<u8>]) -> Result<Self, LedgerError> {
        if chunks.is_empty() {
            return Err(LedgerError::EmptyChunks);
        }
        let mut levels = vec![chunks.iter().map(|c| leaf_hash(c)).collect::<Vec<_>>()];
        while levels.last().unwrap().len() > 1 {
            let prev = levels.last().unwrap();
            let mut next = Vec::with_capacity(prev.len().div_ceil(2));
            let mut i = 0;
            while i < prev.len() {
                if i + 1 < prev.len() {
                    next.push(node_hash(&prev[i], &prev[i + 1]));
                    i += 2;
                } else {
                    // odd trailing node: promote unchanged
                    next.push(prev[i]);
                    i += 1;
                }
            }
            levels.push(next);
        }
        Ok(MerkleTree { levels })
    }

    pub fn root(&self) -> Hash32 {
        *self.levels.last().unwrap().first().unwrap()
    }

    pub fn leaf_count(&self) -> usize {
        self.levels[0].len()
    }

    pub fn height(&self) -> usize {
        self.levels.len() - 1
    }

    /// Sibling path from the indexed leaf up to the root. Promoted levels
    /// contribute no step, so the path length is at most the tree height
    /// and exactly the height for power-of-two leaf counts.
    pub fn proof(&self, leaf_index: usize) -> Result<MerkleProof, LedgerError> {
        if leaf_index >= self.leaf_count() {
            return Err(LedgerError::IndexOutOfRange {
                index: leaf_index,
                leaves: self.leaf_count(),
            });
        }
        let mut path = Vec::with_capacity(self.height());
        let mut idx = leaf_index;
        for level in &self.levels[..self.levels.len() - 1] {
            let sibling_idx = idx ^ 1;
            if sibling_idx < level.len() {
                path.push(ProofStep {
                    sibling: level[sibling_idx],
                    sibling_on_left: sibling_idx < idx,
                });
            }
            idx /= 2;
        }
        Ok(MerkleProof { leaf_index, path })
    }
}

/// Root hash of a model/content chunk list.
pub fn merkle_root(chunks: &[Vec<u8>]) -> Result<Hash32, LedgerError> {
    Ok(MerkleTree::from_chunks(chunks)?.root())
}

/// Recompute the root from a chunk and its sibling path.
pub fn verify_proof(root: &Hash32, chunk: &[u8], proof: &MerkleProof) -> bool {
    let mut hash = leaf_hash(chunk);
    for step in &proof.path {
        hash = if step.sibling_on_left {
            node_hash(&step.sibling, &hash)
        } else {
            node_hash(&hash, &step.sibling)
        };
    }
    hash == *root
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::seeded_rng;

    fn chunks_of(n: usize) -> Vec<Vec<u8>> {
        (0..n)
            .map(|i| {
                let mut c = vec![0u8; MIN_CHUNK_BYTES];
                c[0] = i as u8;
                c[1] = 0xA5;
                c
            })
            .collect()
    }

    #[test]
    fn chunk_count_is_ceiling() {
        let c = chunk_content(&[1u8; 100], 64).unwrap();
        assert_eq!(c.chunks.len(), 2);
        assert_eq!(c.chunks[1][36..], [0u8; 28]); // zero padded
        assert_eq!(c.reassemble(), vec![1u8; 100]);
    }

    #[test]
    fn exact_multiple_has_no_padding() {
        let c = chunk_content(&[7u8; 128], 64).unwrap();
        assert_eq!(c.chunks.len(), 2);
        assert!(c.chunks.iter().all(|ch| ch.iter().all(|&b| b == 7)));
    }

    #[test]
    fn chunk_size_minimum_enforced() {
        assert_eq!(
            chunk_content(&[0u8; 10], 32).unwrap_err(),
            LedgerError::ChunkTooSmall { got: 32, min: 64 }
        );
    }

    // Serialization round-trip oracle: chunk -> reassemble -> params.
    #[test]
    fn model_chunks_reassemble_bit_exact() {
        let mut rng = seeded_rng(8, 0, "init");
        let m = ModelParams::new_mlp(&[7, 5, 3], &mut rng);
        let chunked = chunk_model(&m, 64).unwrap();
        let back =
            ModelParams::from_canonical_bytes(&m.shape(), &chunked.reassemble()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn single_chunk_root_is_prefixed_leaf_hash() {
        let chunk = vec![9u8; 64];
        let root = merkle_root(std::slice::from_ref(&chunk)).unwrap();
        assert_eq!(root, sha256_parts(&[&[0x00], &chunk[..]]));
    }

    #[test]
    fn any_byte_change_moves_the_root() {
        let chunks = chunks_of(5);
        let root = merkle_root(&chunks).unwrap();
        for i in 0..5 {
            let mut mutated = chunks.clone();
            mutated[i][3] ^= 0x01;
            assert_ne!(merkle_root(&mutated).unwrap(), root, "chunk {i}");
        }
    }

    // Manual tree recomputation oracle for four chunks:
    // root = H(01 | H(01|L0|L1) | H(01|L2|L3)).
    #[test]
    fn four_chunk_root_matches_hand_built_tree() {
        let chunks = chunks_of(4);
        let l: Vec<Hash32> = chunks
            .iter()
            .map(|c| sha256_parts(&[&[0x00], &c[..]]))
            .collect();
        let h01 = sha256_parts(&[&[0x01], &l[0].0, &l[1].0]);
        let h23 = sha256_parts(&[&[0x01], &l[2].0, &l[3].0]);
        let expected = sha256_parts(&[&[0x01], &h01.0, &h23.0]);
        assert_eq!(merkle_root(&chunks).unwrap(), expected);
    }

    // Odd leaf promotion: with three chunks the last leaf rises unchanged.
    #[test]
    fn three_chunk_root_promotes_trailing_leaf() {
        let chunks = chunks_of(3);
        let l: Vec<Hash32> = chunks
            .iter()
            .map(|c| sha256_parts(&[&[0x00], &c[..]]))
            .collect();
        let h01 = sha256_parts(&[&[0x01], &l[0].0, &l[1].0]);
        let expected = sha256_parts(&[&[0x01], &h01.0, &l[2].0]);
        assert_eq!(merkle_root(&chunks).unwrap(), expected);
    }

    #[test]
    fn empty_chunk_list_is_an_error() {
        assert_eq!(merkle_root(&[]).unwrap_err(), LedgerError::EmptyChunks);
    }

    #[test]
    fn proofs_verify_and_tampering_fails() {
        let chunks = chunks_of(8);
        let tree = MerkleTree::from_chunks(&chunks).unwrap();
        assert_eq!(tree.height(), 3);
        for i in 0..8 {
            let proof = tree.proof(i).unwrap();
            assert_eq!(proof.path.len(), 3);
            assert!(verify_proof(&tree.root(), &chunks[i], &proof));
            let mut bad = chunks[i].clone();
            bad[10] ^= 0x80;
            assert!(!verify_proof(&tree.root(), &bad, &proof));
        }
    }

    #[test]
    fn proofs_cover_odd_shapes() {
        for n in [1usize, 2, 3, 5, 6, 7, 9] {
            let chunks = chunks_of(n);
            let tree = MerkleTree::from_chunks(&chunks).unwrap();
            for i in 0..n {
                let proof = tree.proof(i).unwrap();
                assert!(proof.path.len() <= tree.height());
                assert!(
                    verify_proof(&tree.root(), &chunks[i], &proof),
                    "n={n} leaf {i}"
                );
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(48))]
        // Any leaf of any tree shape proves against the root, and a
        // corrupted byte in that leaf never does.
        #[test]
        fn prop_proofs_verify_and_reject(
            n in 1usize..20,
            leaf_seed in 0u8..255,
            corrupt_byte in 0usize..64,
        ) {
            let chunks: Vec<Vec<u8>> = (0..n)
                .map(|i| {
                    let mut c = vec![leaf_seed; MIN_CHUNK_BYTES];
                    c[0] = i as u8;
                    c
                })
                .collect();
            let tree = MerkleTree::from_chunks(&chunks).unwrap();
            for (i, chunk) in chunks.iter().enumerate() {
                let proof = tree.proof(i).unwrap();
                proptest::prop_assert!(verify_proof(&tree.root(), chunk, &proof));
                let mut bad = chunk.clone();
                bad[corrupt_byte] ^= 0x01;
                proptest::prop_assert!(!verify_proof(&tree.root(), &bad, &proof));
            }
        }
    }

    #[test]
    fn out_of_range_proof_index_errors() {
        let tree = MerkleTree::from_chunks(&chunks_of(4)).unwrap();
        assert_eq!(
            tree.proof(4).unwrap_err(),
            LedgerError::IndexOutOfRange { index: 4, leaves: 4 }
        );
    }
}
