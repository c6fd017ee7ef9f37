//! Three-phase Byzantine agreement on model blocks with learning-quality
//! validation and gradient-based detection of poisoned updates.
//!
//! Each replica is a sans-IO state machine: it consumes signed messages
//! and emits broadcast/finalize actions, so the same code runs under the
//! event-loop harness, the liveness scenarios, and the exhaustive
//! adversary-schedule search. Votes count only from signature-valid
//! senders naming the root the replica derived from its own aggregate
//! recomputation; transitions fire at exactly 2f+1 distinct votes.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::crypto::{Hash32, KeyStore, NodeId, Signature};
use crate::learning::{ModelParams, UpdateRecord};

#[derive(Debug, Error, PartialEq)]
pub enum PbftError {
    #[error("committee of {n} cannot tolerate f={f} (need n >= 3f+1)")]
    CommitteeTooSmall { n: usize, f: usize },
    #[error("empty committee")]
    EmptyCommittee,
}

/// Committee membership and fault budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitteeConfig {
    pub nodes: Vec<NodeId>,
    pub f: usize,
}

impl CommitteeConfig {
    pub fn new(nodes: Vec<NodeId>, f: usize) -> Result<Self, PbftError> {
        if nodes.is_empty() {
            return Err(PbftError::EmptyCommittee);
        }
        if nodes.len() < 3 * f + 1 {
            return Err(PbftError::CommitteeTooSmall { n: nodes.len(), f });
        }
        Ok(CommitteeConfig { nodes, f })
    }

    /// Largest f the committee supports: floor((n-1)/3).
    pub fn max_f(n: usize) -> usize {
        n.saturating_sub(1) / 3
    }

    pub fn quorum(&self) -> usize {
        2 * self.f + 1
    }

    /// Round-robin leader: nodes[view mod n].
    pub fn leader_for(&self, view: u64) -> NodeId {
        self.nodes[(view % self.nodes.len() as u64) as usize]
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.nodes.contains(&node)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Idle,
    PrePrepared,
    Prepared,
    Committed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PbftKind {
    PrePrepare = 0,
    Prepare = 1,
    Commit = 2,
}

/// Signed protocol message. The sender travels in the network envelope;
/// the signature binds the sender's key over the serialized prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct PbftMessage {
    pub kind: PbftKind,
    pub view: u64,
    pub sequence: u64,
    pub root: Hash32,
    /// Validation accuracy of the proposed aggregate; PREPARE only.
    pub accuracy: Option<f64>,
    pub signature: Signature,
}

impl PbftMessage {
    fn signing_bytes(kind: PbftKind, view: u64, sequence: u64, root: &Hash32, accuracy: Option<f64>) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u8(kind as u8);
        w.put_u64(view);
        w.put_u64(sequence);
        w.put_hash(root);
        if let Some(acc) = accuracy {
            w.put_f64(acc);
        }
        w.finish()
    }

    pub fn new_signed(
        kind: PbftKind,
        view: u64,
        sequence: u64,
        root: Hash32,
        accuracy: Option<f64>,
        sender: NodeId,
        keys: &KeyStore,
    ) -> Self {
        let accuracy = match kind {
            PbftKind::Prepare => accuracy,
            _ => None,
        };
        let signature = keys.sign(
            sender,
            &Self::signing_bytes(kind, view, sequence, &root, accuracy),
        );
        PbftMessage {
            kind,
            view,
            sequence,
            root,
            accuracy,
            signature,
        }
    }

    pub fn verify(&self, sender: NodeId, keys: &KeyStore) -> bool {
        keys.verify(
            sender,
            &Self::signing_bytes(self.kind, self.view, self.sequence, &self.root, self.accuracy),
            &self.signature,
        )
    }

    /// kind(1) | view(8) | sequence(8) | root(32) | acc(8, PREPARE only) |
    /// signature(32), big-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u8(self.kind as u8);
        w.put_u64(self.view);
        w.put_u64(self.sequence);
        w.put_hash(&self.root);
        if let Some(acc) = self.accuracy {
            w.put_f64(acc);
        }
        w.put_signature(&self.signature);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let kind = match r.u8()? {
            0 => PbftKind::PrePrepare,
            1 => PbftKind::Prepare,
            2 => PbftKind::Commit,
            k => {
                return Err(CodecError::Invalid {
                    offset: 0,
                    reason: format!("unknown pbft kind {k}"),
                })
            }
        };
        let view = r.u64()?;
        let sequence = r.u64()?;
        let root = r.hash()?;
        let accuracy = if kind == PbftKind::Prepare {
            Some(r.f64()?)
        } else {
            None
        };
        let signature = r.signature()?;
        r.expect_end()?;
        Ok(PbftMessage {
            kind,
            view,
            sequence,
            root,
            accuracy,
            signature,
        })
    }
}

/// Per-(view, sequence) voting state.
#[derive(Debug, Clone)]
pub struct ViewState {
    pub view: u64,
    pub sequence: u64,
    pub phase: Phase,
    pub prepare_votes: BTreeSet<NodeId>,
    pub commit_votes: BTreeSet<NodeId>,
    /// Root accepted from the leader's PRE-PREPARE.
    pub accepted_root: Option<Hash32>,
}

impl ViewState {
    fn new(view: u64, sequence: u64) -> Self {
        ViewState {
            view,
            sequence,
            phase: Phase::Idle,
            prepare_votes: BTreeSet::new(),
            commit_votes: BTreeSet::new(),
            accepted_root: None,
        }
    }
}

/// What a replica wants done after handling an input.
#[derive(Debug, Clone, PartialEq)]
pub enum ReplicaAction {
    /// Broadcast to the whole committee (including loopback to self).
    Broadcast(PbftMessage),
    /// Commit the round: append block and audit record, adopt the model.
    Finalize { sequence: u64, root: Hash32 },
}

/// Everything a replica needs to know about the current round, derived
/// deterministically from the shared update set.
#[derive(Debug, Clone)]
pub struct RoundContext {
    pub sequence: u64,
    /// The replica's own recomputation of the filtered aggregate root.
    pub expected_root: Hash32,
    /// Accuracy of that aggregate on the replica's validation slice.
    pub aggregate_accuracy: f64,
    /// Votes below this accuracy do not count (best proof - margin).
    pub quality_floor: f64,
    /// Detector suspects whose PREPAREs are discounted.
    pub discounted: BTreeSet<NodeId>,
}

/// One committee member's state machine.
#[derive(Debug, Clone)]
pub struct Replica {
    pub node: NodeId,
    pub cfg: CommitteeConfig,
    pub state: ViewState,
    ctx: Option<RoundContext>,
    pub finalized: Option<(u64, Hash32)>,
}

impl Replica {
    pub fn new(node: NodeId, cfg: CommitteeConfig) -> Self {
        Replica {
            node,
            cfg,
            state: ViewState::new(0, 0),
            ctx: None,
            finalized: None,
        }
    }

    pub fn view(&self) -> u64 {
        self.state.view
    }

    pub fn context(&self) -> Option<&RoundContext> {
        self.ctx.as_ref()
    }

    /// Start a sequence. The leader immediately emits PRE-PREPARE.
    pub fn begin_round(&mut self, ctx: RoundContext, keys: &KeyStore) -> Vec<ReplicaAction> {
        let view = self.state.view;
        self.state = ViewState::new(view, ctx.sequence);
        self.finalized = None;
        self.ctx = Some(ctx);
        self.propose_if_leader(keys)
    }

    fn propose_if_leader(&mut self, keys: &KeyStore) -> Vec<ReplicaAction> {
        let Some(ctx) = &self.ctx else {
            return Vec::new();
        };
        if self.cfg.leader_for(self.state.view) != self.node {
            return Vec::new();
        }
        let msg = PbftMessage::new_signed(
            PbftKind::PrePrepare,
            self.state.view,
            self.state.sequence,
            ctx.expected_root,
            None,
            self.node,
            keys,
        );
        vec![ReplicaAction::Broadcast(msg)]
    }

    /// Handle a committee message; `sender` comes from the envelope.
    pub fn on_message(
        &mut self,
        sender: NodeId,
        msg: &PbftMessage,
        keys: &KeyStore,
    ) -> Vec<ReplicaAction> {
        let Some(ctx) = self.ctx.clone() else {
            return Vec::new();
        };
        if self.finalized.is_some() {
            return Vec::new();
        }
        // Stale or future coordinates are ignored.
        if msg.view != self.state.view || msg.sequence != self.state.sequence {
            return Vec::new();
        }
        if !self.cfg.contains(sender) || !msg.verify(sender, keys) {
            return Vec::new();
        }
        let mut actions = Vec::new();
        match msg.kind {
            PbftKind::PrePrepare => {
                // Only the view's leader may propose, and the proposal
                // must match this replica's own aggregate recomputation.
                if sender != self.cfg.leader_for(self.state.view) {
                    return Vec::new();
                }
                if msg.root != ctx.expected_root {
                    return Vec::new();
                }
                if self.state.phase == Phase::Idle {
                    self.state.phase = Phase::PrePrepared;
                    self.state.accepted_root = Some(msg.root);
                    // Quality gate on our own PREPARE: broadcast only if
                    // the aggregate validates above the floor.
                    if ctx.aggregate_accuracy >= ctx.quality_floor {
                        let prepare = PbftMessage::new_signed(
                            PbftKind::Prepare,
                            self.state.view,
                            self.state.sequence,
                            msg.root,
                            Some(ctx.aggregate_accuracy),
                            self.node,
                            keys,
                        );
                        actions.push(ReplicaAction::Broadcast(prepare));
                    }
                }
            }
            PbftKind::Prepare => {
                if msg.root != ctx.expected_root {
                    return Vec::new();
                }
                let acc_ok = msg.accuracy.is_some_and(|a| a >= ctx.quality_floor);
                let discounted = ctx.discounted.contains(&sender);
                if acc_ok && !discounted {
                    self.state.prepare_votes.insert(sender);
                }
            }
            PbftKind::Commit => {
                if msg.root != ctx.expected_root {
                    return Vec::new();
                }
                self.state.commit_votes.insert(sender);
            }
        }
        actions.extend(self.try_transition(keys));
        actions
    }

    /// Fire any threshold crossings (kept separate so buffered votes that
    /// arrived before the PRE-PREPARE still count).
    fn try_transition(&mut self, keys: &KeyStore) -> Vec<ReplicaAction> {
        let mut actions = Vec::new();
        let quorum = self.cfg.quorum();
        if self.state.phase == Phase::PrePrepared && self.state.prepare_votes.len() >= quorum {
            self.state.phase = Phase::Prepared;
            let root = self.state.accepted_root.expect("prepared implies accepted root");
            let commit = PbftMessage::new_signed(
                PbftKind::Commit,
                self.state.view,
                self.state.sequence,
                root,
                None,
                self.node,
                keys,
            );
            actions.push(ReplicaAction::Broadcast(commit));
        }
        if self.state.phase == Phase::Prepared && self.state.commit_votes.len() >= quorum {
            let root = self.state.accepted_root.expect("prepared implies accepted root");
            assert!(
                self.finalized.is_none(),
                "replica {} finalized sequence {} twice",
                self.node,
                self.state.sequence
            );
            self.state.phase = Phase::Committed;
            self.finalized = Some((self.state.sequence, root));
            actions.push(ReplicaAction::Finalize {
                sequence: self.state.sequence,
                root,
            });
        }
        actions
    }

    /// Liveness timeout: rotate the leader and retry the sequence,
    /// discarding uncommitted votes. Returns the new leader's proposal
    /// when this replica takes over.
    pub fn on_timeout(&mut self, timed_out_view: u64, keys: &KeyStore) -> Vec<ReplicaAction> {
        if self.finalized.is_some() || timed_out_view != self.state.view {
            return Vec::new();
        }
        let sequence = self.state.sequence;
        self.state = ViewState::new(self.state.view + 1, sequence);
        self.propose_if_leader(keys)
    }
}

/// Flag updates whose delta from the reference model is anomalous.
///
/// Two passes over the element-wise deltas: first the magnitude rule (L2
/// norm above `magnitude_factor` times the median norm), then a
/// direction rule comparing each remaining delta against the mean of the
/// other magnitude-clean deltas (cosine < `cosine_floor`). Running the
/// cosine pass against magnitude-clean peers keeps one enormous
/// poisoned update from swamping the mean and dragging honest deltas
/// below the floor.
pub fn detect_byzantine(
    updates: &[UpdateRecord],
    reference: &ModelParams,
    magnitude_factor: f64,
    cosine_floor: f64,
) -> BTreeSet<NodeId> {
    let mut suspects = BTreeSet::new();
    if updates.len() < 2 {
        return suspects;
    }
    let reference_flat: Vec<f64> = reference.values().collect();
    let mut deltas: Vec<(NodeId, Option<Vec<f64>>)> = Vec::with_capacity(updates.len());
    for u in updates {
        let flat: Vec<f64> = u.params.values().collect();
        if flat.len() != reference_flat.len() {
            // Can't even compare shapes: suspicious by construction.
            deltas.push((u.node, None));
            continue;
        }
        let delta: Vec<f64> = flat
            .iter()
            .zip(&reference_flat)
            .map(|(a, b)| a - b)
            .collect();
        deltas.push((u.node, Some(delta)));
    }

    let norms: Vec<f64> = deltas
        .iter()
        .map(|(_, d)| {
            d.as_ref()
                .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    let median = {
        let mut sorted: Vec<f64> = norms.iter().copied().filter(|n| n.is_finite()).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.is_empty() {
            0.0
        } else if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
        }
    };

    // Pass 1: magnitude.
    let mut magnitude_flagged = vec![false; deltas.len()];
    for (i, (node, delta)) in deltas.iter().enumerate() {
        if delta.is_none() || (median > 0.0 && norms[i] > median * magnitude_factor) {
            magnitude_flagged[i] = true;
            suspects.insert(*node);
        }
    }

    // Pass 2: direction against the magnitude-clean peers.
    for (i, (node, delta)) in deltas.iter().enumerate() {
        if magnitude_flagged[i] {
            continue;
        }
        let delta = delta.as_ref().expect("clean deltas have values");
        let mut mean = vec![0.0f64; delta.len()];
        let mut others = 0usize;
        for (j, (_, other)) in deltas.iter().enumerate() {
            if i == j || magnitude_flagged[j] {
                continue;
            }
            let other = other.as_ref().expect("clean deltas have values");
            others += 1;
            for (m, v) in mean.iter_mut().zip(other) {
                *m += v;
            }
        }
        if others == 0 {
            continue;
        }
        for m in mean.iter_mut() {
            *m /= others as f64;
        }
        let dot: f64 = delta.iter().zip(&mean).map(|(a, b)| a * b).sum();
        let norm_mean = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norms[i] == 0.0 || norm_mean == 0.0 {
            continue; // zero deltas carry no direction, aligned by definition
        }
        let cosine = dot / (norms[i] * norm_mean);
        if cosine < cosine_floor {
            suspects.insert(*node);
        }
    }
    suspects
}
