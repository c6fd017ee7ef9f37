//! Admission under three trust models, scalar reputation, and scripted
//! Byzantine update corruption.
//!
//! Role certificates are opaque string tokens, consortium approvals are
//! member signatures over the candidate id, and permissionless entry is
//! a stake check. Adversaries corrupt only their own update (and re-sign
//! it with their own key); they cannot forge anyone else's signature.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::crypto::{seeded_rng, KeyStore, NodeId, Signature};
use crate::learning::{add_dp_noise, UpdateRecord};

#[derive(Debug, Error, PartialEq)]
pub enum TrustError {
    #[error("invalid admission policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid adversary spec: {0}")]
    InvalidAdversary(String),
}

/// Participation gate for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum AdmissionPolicy {
    /// Anyone staking at least the minimum joins.
    Permissionless { stake_minimum: u64 },
    /// Multi-signature onboarding by existing members.
    Consortium { approvers_required: usize },
    /// Role-based access control against a fixed role table.
    Permissioned { role_table: BTreeSet<String> },
}

impl AdmissionPolicy {
    pub fn validate(&self) -> Result<(), TrustError> {
        match self {
            AdmissionPolicy::Permissionless { .. } => Ok(()),
            AdmissionPolicy::Consortium { approvers_required } => {
                if *approvers_required < 2 {
                    Err(TrustError::InvalidPolicy(
                        "consortium requires approvers_required >= 2".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            AdmissionPolicy::Permissioned { role_table } => {
                if role_table.is_empty() {
                    Err(TrustError::InvalidPolicy(
                        "permissioned role_table must be non-empty".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Credentials a joining node presents.
#[derive(Debug, Clone, Default)]
pub struct Candidate {
    pub node: NodeId,
    pub stake: u64,
    /// (approver, signature over this candidate's id).
    pub approvals: Vec<(NodeId, Signature)>,
    pub role_cert: Option<String>,
}

impl Candidate {
    /// Message an approver signs to endorse this candidate.
    pub fn approval_message(candidate: NodeId) -> Vec<u8> {
        let mut msg = b"admit:".to_vec();
        msg.extend_from_slice(&candidate.to_be_bytes());
        msg
    }
}

/// Verification context for admission: the signature registry and the
/// current member set eligible to approve.
pub struct AdmissionContext<'a> {
    pub keys: &'a KeyStore,
    pub members: &'a BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdmissionVerdict {
    Accepted,
    Rejected(String),
}

impl AdmissionVerdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, AdmissionVerdict::Accepted)
    }
}

/// Pure admission decision: the same candidate, policy, and context always
/// produce the same verdict.
pub fn admit(
    candidate: &Candidate,
    policy: &AdmissionPolicy,
    ctx: &AdmissionContext<'_>,
) -> AdmissionVerdict {
    match policy {
        AdmissionPolicy::Permissionless { stake_minimum } => {
            if candidate.stake >= *stake_minimum {
                AdmissionVerdict::Accepted
            } else {
                AdmissionVerdict::Rejected(format!(
                    "stake {} below minimum {}",
                    candidate.stake, stake_minimum
                ))
            }
        }
        AdmissionPolicy::Consortium { approvers_required } => {
            let msg = Candidate::approval_message(candidate.node);
            let mut valid: BTreeSet<NodeId> = BTreeSet::new();
            for (approver, sig) in &candidate.approvals {
                if ctx.members.contains(approver) && ctx.keys.verify(*approver, &msg, sig) {
                    valid.insert(*approver);
                }
            }
            if valid.len() >= *approvers_required {
                AdmissionVerdict::Accepted
            } else {
                AdmissionVerdict::Rejected(format!(
                    "{} valid approvals, {} required",
                    valid.len(),
                    approvers_required
                ))
            }
        }
        AdmissionPolicy::Permissioned { role_table } => match &candidate.role_cert {
            Some(role) if role_table.contains(role) => AdmissionVerdict::Accepted,
            Some(role) => {
                AdmissionVerdict::Rejected(format!("role {role:?} not in role table"))
            }
            None => AdmissionVerdict::Rejected("missing role certificate".into()),
        },
    }
}

/// What a Byzantine node does to its own update before submission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdversaryBehavior {
    /// Negate every parameter.
    SignFlip,
    /// Multiply every parameter by `factor`.
    Scale { factor: f64 },
    /// Add seeded Gaussian noise of standard deviation `sigma`.
    GaussianNoise { sigma: f64 },
    /// Inflate the claimed accuracy by `delta` (capped at 1.0) without
    /// touching the parameters.
    AccuracySpoof { delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarySpec {
    /// Fraction of nodes behaving adversarially, in [0,1].
    pub fraction: f64,
    pub behavior: AdversaryBehavior,
    pub seed: u64,
}

impl AdversarySpec {
    pub fn validate(&self) -> Result<(), TrustError> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(TrustError::InvalidAdversary(format!(
                "fraction {} outside [0,1]",
                self.fraction
            )));
        }
        match self.behavior {
            AdversaryBehavior::Scale { factor } if !(factor > 0.0) => Err(
                TrustError::InvalidAdversary(format!("scale factor {factor} must be > 0")),
            ),
            AdversaryBehavior::GaussianNoise { sigma } if sigma < 0.0 => Err(
                TrustError::InvalidAdversary(format!("noise sigma {sigma} must be >= 0")),
            ),
            AdversaryBehavior::AccuracySpoof { delta } if delta < 0.0 => Err(
                TrustError::InvalidAdversary(format!("spoof delta {delta} must be >= 0")),
            ),
            _ => Ok(()),
        }
    }

    /// Seeded selection of exactly floor(fraction * n) Byzantine nodes.
    pub fn select_byzantine(&self, nodes: &[NodeId]) -> BTreeSet<NodeId> {
        let count = (self.fraction * nodes.len() as f64).floor() as usize;
        let mut pool: Vec<NodeId> = nodes.to_vec();
        pool.sort_unstable();
        let mut rng = seeded_rng(self.seed, 0, "byz-select");
        pool.shuffle(&mut rng);
        pool.into_iter().take(count).collect()
    }
}

/// Corrupt an update according to the behavior and re-sign it with the
/// adversary's own key.
pub fn apply_adversary(
    update: &UpdateRecord,
    behavior: &AdversaryBehavior,
    keys: &KeyStore,
    rng: &mut ChaCha8Rng,
) -> UpdateRecord {
    let mut out = update.clone();
    match behavior {
        AdversaryBehavior::SignFlip => out.params.map_in_place(|v| -v),
        AdversaryBehavior::Scale { factor } => {
            let f = *factor;
            out.params.map_in_place(|v| v * f);
        }
        AdversaryBehavior::GaussianNoise { sigma } => {
            out.params = add_dp_noise(&out.params, *sigma, rng)
                .expect("validated sigma is non-negative");
        }
        AdversaryBehavior::AccuracySpoof { delta } => {
            out.claimed_accuracy = (out.claimed_accuracy + delta).min(1.0);
        }
    }
    out.resign(keys);
    out
}

pub const REPUTATION_BETA: f64 = 0.2;
pub const LEADER_BAR_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundOutcome {
    HonestContribution,
    FlaggedByDetector,
    ExcludedByVote,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReputationScore {
    pub node: NodeId,
    pub score: f64,
    pub history: u64,
}

impl ReputationScore {
    pub fn new(node: NodeId) -> Self {
        ReputationScore {
            node,
            score: 1.0,
            history: 0,
        }
    }
}

/// Exponential moving average toward 1 for honest rounds and 0 otherwise,
/// clamped to [0,1].
pub fn update_reputation(score: &ReputationScore, outcome: RoundOutcome) -> ReputationScore {
    let target = match outcome {
        RoundOutcome::HonestContribution => 1.0,
        RoundOutcome::FlaggedByDetector | RoundOutcome::ExcludedByVote => 0.0,
    };
    ReputationScore {
        node: score.node,
        score: ((1.0 - REPUTATION_BETA) * score.score + REPUTATION_BETA * target).clamp(0.0, 1.0),
        history: score.history + 1,
    }
}

/// Append-only reputation table owned by the event loop.
#[derive(Debug, Clone, Default)]
pub struct ReputationTable {
    scores: std::collections::BTreeMap<NodeId, ReputationScore>,
}

impl ReputationTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn score_of(&self, node: NodeId) -> ReputationScore {
        self.scores
            .get(&node)
            .copied()
            .unwrap_or_else(|| ReputationScore::new(node))
    }

    pub fn record(&mut self, node: NodeId, outcome: RoundOutcome) {
        let next = update_reputation(&self.score_of(node), outcome);
        self.scores.insert(node, next);
    }

    /// Barred nodes keep participating but cannot be chosen as leader or
    /// aggregator.
    pub fn is_barred(&self, node: NodeId) -> bool {
        self.score_of(node).score < LEADER_BAR_THRESHOLD
    }

    pub fn snapshot(&self) -> Vec<ReputationScore> {
        self.scores.values().copied().collect()
    }
}
