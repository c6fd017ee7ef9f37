//! Proof of Quality: accuracy-ranked leader election with Byzantine
//! verification voting.
//!
//! Every participant evaluates its model on the shared validation slice,
//! signs a quality proof, and the best valid proof leads aggregation.
//! Validators re-verify each claim by re-evaluating the published model,
//! recompute the leader's aggregate over the same deterministic inclusion
//! set, and vote; a round commits only with more than two thirds of the
//! votes. Inclusion filters out updates whose claims fail re-evaluation
//! and updates far below the round's best re-verified accuracy, so a
//! poisoned update cannot ride into the committed aggregate.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::crypto::{Hash32, KeyStore, NodeId, Signature};
use crate::learning::{evaluate, fedavg, DatasetPartition, ModelParams, UpdateRecord};
use crate::ledger::{chunk_model, merkle_root};

use super::{best_verified_accuracy, two_thirds_quorum, VerifiedUpdate};

#[derive(Debug, Error)]
pub enum PoqError {
    #[error("no valid proofs; round aborts without a leader")]
    NoValidProofs,
    #[error("no updates eligible for aggregation")]
    NothingToAggregate,
    #[error("evaluation failed: {0}")]
    Learn(#[from] crate::learning::LearnError),
    #[error("aggregation failed: {0}")]
    Agg(#[from] crate::learning::AggError),
    #[error("storage failure: {0}")]
    Ledger(#[from] crate::ledger::LedgerError),
}

#[derive(Debug, Clone, Copy)]
pub struct PoqConfig {
    /// Committed aggregate must re-evaluate within this of the round's
    /// best re-verified participant accuracy.
    pub accuracy_tolerance: f64,
    /// Claimed accuracy must match re-evaluation within this.
    pub claim_tolerance: f64,
    /// Updates below (best re-verified accuracy - margin) stay out of
    /// the aggregate.
    pub exclusion_margin: f64,
    /// Chunk size used when deriving model roots.
    pub chunk_bytes: usize,
    /// When false, every signature-valid update aggregates and votes are
    /// skipped (the plain-FedAvg ablation).
    pub verification_enabled: bool,
}

impl Default for PoqConfig {
    fn default() -> Self {
        PoqConfig {
            accuracy_tolerance: 0.05,
            claim_tolerance: 0.02,
            exclusion_margin: 0.2,
            chunk_bytes: crate::ledger::DEFAULT_CHUNK_BYTES,
            verification_enabled: true,
        }
    }
}

/// Signed claim that a node's model reaches a given accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityProof {
    pub node: NodeId,
    pub accuracy: f64,
    pub model_hash: Hash32,
    pub signature: Signature,
}

impl QualityProof {
    fn signing_bytes(accuracy: f64, model_hash: &Hash32) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_f64(accuracy);
        w.put_hash(model_hash);
        w.finish()
    }

    pub fn verify(&self, keys: &KeyStore) -> bool {
        keys.verify(
            self.node,
            &Self::signing_bytes(self.accuracy, &self.model_hash),
            &self.signature,
        )
    }

    /// Length-prefixed record: node(8) | accuracy(8) | model_hash(32) |
    /// signature(32).
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Writer::new();
        body.put_u64(self.node);
        body.put_f64(self.accuracy);
        body.put_hash(&self.model_hash);
        body.put_signature(&self.signature);
        let mut w = Writer::new();
        w.put_bytes(&body.finish());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut outer = Reader::new(bytes);
        let body = outer.bytes()?;
        outer.expect_end()?;
        let mut r = Reader::new(body);
        let proof = QualityProof {
            node: r.u64()?,
            accuracy: r.f64()?,
            model_hash: r.hash()?,
            signature: r.signature()?,
        };
        r.expect_end()?;
        Ok(proof)
    }
}

/// Evaluate on the shared validation slice, hash the model, and sign.
pub fn submit_proof(
    node: NodeId,
    model: &ModelParams,
    val_set: &DatasetPartition,
    keys: &KeyStore,
    chunk_bytes: usize,
) -> Result<QualityProof, PoqError> {
    let accuracy = evaluate(model, val_set)?;
    let chunked = chunk_model(model, chunk_bytes)?;
    let model_hash = merkle_root(&chunked.chunks)?;
    let signature = keys.sign(node, &QualityProof::signing_bytes(accuracy, &model_hash));
    Ok(QualityProof {
        node,
        accuracy,
        model_hash,
        signature,
    })
}

/// Highest-accuracy valid proof wins; ties break to the lowest node id.
/// Invalid-signature proofs are excluded before ranking.
pub fn select_leader(proofs: &[QualityProof], keys: &KeyStore) -> Result<NodeId, PoqError> {
    proofs
        .iter()
        .filter(|p| p.verify(keys))
        .fold(None::<&QualityProof>, |best, p| match best {
            None => Some(p),
            Some(b) if p.accuracy > b.accuracy => Some(p),
            Some(b) if p.accuracy == b.accuracy && p.node < b.node => Some(p),
            Some(b) => Some(b),
        })
        .map(|p| p.node)
        .ok_or(PoqError::NoValidProofs)
}

/// The deterministic inclusion rule shared by the leader and every
/// validator. With verification on: signature valid, claim survives
/// re-evaluation, and re-verified accuracy within the exclusion margin
/// of the round's best. With verification off: signature valid only.
pub fn aggregation_set<'a>(
    verified: &'a [VerifiedUpdate],
    cfg: &PoqConfig,
) -> Vec<&'a UpdateRecord> {
    if !cfg.verification_enabled {
        return verified
            .iter()
            .filter(|v| v.signature_ok)
            .map(|v| &v.update)
            .collect();
    }
    let best = best_verified_accuracy(verified);
    let floor = best - cfg.exclusion_margin;
    verified
        .iter()
        .filter(|v| v.signature_ok && v.claim_ok && v.verified_accuracy >= floor)
        .map(|v| &v.update)
        .collect()
}

/// What the leader broadcasts after aggregating.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationProposal {
    pub round: u64,
    pub leader: NodeId,
    pub included: Vec<NodeId>,
    pub model_root: Hash32,
}

/// Aggregate the inclusion set and derive the proposal.
pub fn build_proposal(
    round: u64,
    leader: NodeId,
    verified: &[VerifiedUpdate],
    cfg: &PoqConfig,
) -> Result<(AggregationProposal, ModelParams), PoqError> {
    let included = aggregation_set(verified, cfg);
    if included.is_empty() {
        return Err(PoqError::NothingToAggregate);
    }
    let model = fedavg(included.iter().copied())?;
    let chunked = chunk_model(&model, cfg.chunk_bytes)?;
    let model_root = merkle_root(&chunked.chunks)?;
    Ok((
        AggregationProposal {
            round,
            leader,
            included: included.iter().map(|u| u.node).collect(),
            model_root,
        },
        model,
    ))
}

/// One validator's independent accept/reject decision: recompute the
/// aggregate, compare roots, and re-evaluate its quality against the best
/// participant.
pub fn validator_vote(
    proposal: &AggregationProposal,
    verified: &[VerifiedUpdate],
    val_set: &DatasetPartition,
    cfg: &PoqConfig,
) -> bool {
    let (expected, model) = match build_proposal(proposal.round, proposal.leader, verified, cfg) {
        Ok(out) => out,
        Err(_) => return false,
    };
    if expected.model_root != proposal.model_root || expected.included != proposal.included {
        return false;
    }
    let aggregate_accuracy = match evaluate(&model, val_set) {
        Ok(acc) => acc,
        Err(_) => return false,
    };
    aggregate_accuracy >= best_verified_accuracy(verified) - cfg.accuracy_tolerance
}

/// Exact Byzantine vote count: accepted iff accepts reach
/// floor(2n/3) + 1 of the n validators.
pub fn tally_votes(votes: &BTreeMap<NodeId, bool>, n_validators: usize) -> bool {
    let accepts = votes.values().filter(|&&v| v).count();
    accepts >= two_thirds_quorum(n_validators)
}

/// Run the whole verification phase at once: every validator votes
/// independently over its own recomputation and the tally decides.
pub fn verify_aggregation(
    proposal: &AggregationProposal,
    verified: &[VerifiedUpdate],
    validators: &[NodeId],
    val_set: &DatasetPartition,
    cfg: &PoqConfig,
) -> bool {
    let votes: BTreeMap<NodeId, bool> = validators
        .iter()
        .map(|&v| (v, validator_vote(proposal, verified, val_set, cfg)))
        .collect();
    tally_votes(&votes, validators.len())
}

/// Per-round consensus state as tracked by the driver.
#[derive(Debug, Clone, Default)]
pub struct PoqRoundState {
    pub round: u64,
    pub proofs: BTreeMap<NodeId, QualityProof>,
    pub leader: Option<NodeId>,
    pub votes: BTreeMap<NodeId, bool>,
}
