//! Consensus protocols over federated training signals.
//!
//! Three interchangeable commit paths: [`poq`] elects the
//! highest-accuracy participant as leader and validates its aggregate by
//! Byzantine voting, [`pofl`] eases each miner's hash target by its
//! training quality, and [`flpbft`] runs three-phase Byzantine agreement
//! with gradient-based detection of poisoned updates.

pub mod flpbft;
pub mod pofl;
pub mod poq;

use crate::crypto::KeyStore;
use crate::learning::{evaluate, DatasetPartition, UpdateRecord};

/// Accept threshold for Byzantine voting over n validators: strictly more
/// than two thirds.
pub fn two_thirds_quorum(n: usize) -> usize {
    2 * n / 3 + 1
}

/// An update re-checked by a validator: signature verified against the
/// registry and accuracy re-measured on the shared validation slice.
#[derive(Debug, Clone)]
pub struct VerifiedUpdate {
    pub update: UpdateRecord,
    pub signature_ok: bool,
    /// Independent re-evaluation of the update's parameters.
    pub verified_accuracy: f64,
    /// Claimed accuracy within tolerance of the re-evaluation.
    pub claim_ok: bool,
}

/// Re-verify a round's updates the way every honest validator does.
/// Deterministic: all validators derive identical verdicts.
pub fn verify_round_updates(
    updates: &[UpdateRecord],
    val_set: &DatasetPartition,
    keys: &KeyStore,
    claim_tolerance: f64,
) -> Vec<VerifiedUpdate> {
    updates
        .iter()
        .map(|u| {
            let signature_ok = u.verify_signature(keys);
            let verified_accuracy = evaluate(&u.params, val_set).unwrap_or(0.0);
            let claim_ok = (u.claimed_accuracy - verified_accuracy).abs() <= claim_tolerance;
            VerifiedUpdate {
                update: u.clone(),
                signature_ok,
                verified_accuracy,
                claim_ok,
            }
        })
        .collect()
}

/// Highest re-verified accuracy among signature-valid updates.
pub fn best_verified_accuracy(verified: &[VerifiedUpdate]) -> f64 {
    verified
        .iter()
        .filter(|v| v.signature_ok)
        .map(|v| v.verified_accuracy)
        .fold(0.0, f64::max)
}
