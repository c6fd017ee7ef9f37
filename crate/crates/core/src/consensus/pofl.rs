//! Proof of Federated Learning: mining whose hash target is eased
//! exponentially by training quality.
//!
//! A miner with loss L searches for a nonce with
//! `sha256(header || nonce) < target * e^(-alpha * L)`. The exponential
//! factor is quantized to 64-bit fixed point (2^-63 resolution) and
//! multiplied into the 256-bit target with integer arithmetic, so two
//! machines always agree on the threshold. Winner selection divides each
//! hash by its own easing factor (equivalently, scales it back up by
//! e^(+alpha*L)), favoring low-loss miners among simultaneous solutions.

use std::collections::BTreeMap;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::Writer;
use crate::crypto::{sha256, Hash32, NodeId};
use crate::learning::{evaluate, evaluate_loss, fedavg, DatasetPartition, UpdateRecord};

#[derive(Debug, Error)]
pub enum PoflError {
    #[error("no participants in reward distribution")]
    NoParticipants,
    #[error("evaluation failed: {0}")]
    Learn(#[from] crate::learning::LearnError),
    #[error("aggregation failed: {0}")]
    Agg(#[from] crate::learning::AggError),
}

/// Unsigned 256-bit integer, little-endian limbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct U256([u64; 4]);

impl U256 {
    pub const ZERO: U256 = U256([0; 4]);
    pub const MAX: U256 = U256([u64::MAX; 4]);

    /// 2^exp for exp in 0..256.
    pub fn pow2(exp: u32) -> U256 {
        assert!(exp < 256);
        let mut limbs = [0u64; 4];
        limbs[(exp / 64) as usize] = 1u64 << (exp % 64);
        U256(limbs)
    }

    pub fn from_be_bytes(bytes: &[u8; 32]) -> U256 {
        let mut limbs = [0u64; 4];
        for (i, limb) in limbs.iter_mut().enumerate() {
            let start = 32 - 8 * (i + 1);
            *limb = u64::from_be_bytes(bytes[start..start + 8].try_into().unwrap());
        }
        U256(limbs)
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0; 4]
    }

    /// Floor division by a power of two (shift < 64).
    pub fn shr_small(&self, shift: u32) -> U256 {
        assert!(shift < 64);
        if shift == 0 {
            return *self;
        }
        let mut out = [0u64; 4];
        for i in 0..4 {
            out[i] = self.0[i] >> shift;
            if i + 1 < 4 {
                out[i] |= self.0[i + 1] << (64 - shift);
            }
        }
        U256(out)
    }

    /// Widening multiply by a u64: returns 5 little-endian limbs.
    fn mul_wide(&self, m: u64) -> [u64; 5] {
        let mut out = [0u64; 5];
        let mut carry: u128 = 0;
        for i in 0..4 {
            let prod = self.0[i] as u128 * m as u128 + carry;
            out[i] = prod as u64;
            carry = prod >> 64;
        }
        out[4] = carry as u64;
        out
    }

    /// floor(self * m / 2^63); caller guarantees m <= 2^63 so the result
    /// fits 256 bits.
    fn mul_q63(&self, m: u64) -> U256 {
        debug_assert!(m <= 1u64 << 63);
        let wide = self.mul_wide(m);
        let mut out = [0u64; 4];
        for i in 0..4 {
            out[i] = (wide[i] >> 63) | (wide[i + 1] << 1);
        }
        U256(out)
    }
}

impl Ord for U256 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        for i in (0..4).rev() {
            match self.0[i].cmp(&other.0[i]) {
                std::cmp::Ordering::Equal => continue,
                non_eq => return non_eq,
            }
        }
        std::cmp::Ordering::Equal
    }
}

impl PartialOrd for U256 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DifficultyParams {
    pub target: U256,
    /// Sensitivity of the target to the training loss; 0 disables easing.
    pub alpha: f64,
}

/// e^(-alpha * loss) in Q0.63 fixed point.
fn easing_factor_q63(alpha: f64, loss: f64) -> u64 {
    let scaled = (-alpha * loss).exp() * (1u64 << 63) as f64;
    // loss >= 0 and alpha >= 0 keep the factor in [0, 2^63].
    if scaled >= (1u64 << 63) as f64 {
        1u64 << 63
    } else {
        scaled.round() as u64
    }
}

/// floor(target * e^(-alpha * loss)). A zero result means mining is
/// impossible for this miner this round; that is signaled by the value,
/// not an error.
pub fn adjusted_target(d: &DifficultyParams, loss: f64) -> U256 {
    let factor = easing_factor_q63(d.alpha, loss.max(0.0));
    if factor == 1u64 << 63 {
        return d.target;
    }
    d.target.mul_q63(factor)
}

/// Block candidate mined over a miner's published (noised) update.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningBlock {
    pub prev_hash: Hash32,
    /// Merkle root of the published update's parameters.
    pub model_root: Hash32,
    /// Loss of the published model on the shared validation slice; also
    /// the difficulty input, so verifiers can re-check it.
    pub train_loss: f64,
    pub miner: NodeId,
    pub nonce: u64,
    /// Off-chain address of the published update content.
    pub noised_params_ref: Hash32,
}

impl MiningBlock {
    /// prev_hash(32) | model_root(32) | loss f64 BE(8) | miner(8).
    pub fn header_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_hash(&self.prev_hash);
        w.put_hash(&self.model_root);
        w.put_f64(self.train_loss);
        w.put_u64(self.miner);
        w.finish()
    }

    pub fn hash_with_nonce(&self, nonce: u64) -> U256 {
        let mut bytes = self.header_bytes();
        bytes.extend_from_slice(&nonce.to_be_bytes());
        U256::from_be_bytes(sha256(&bytes).as_bytes())
    }

    pub fn block_hash(&self) -> U256 {
        self.hash_with_nonce(self.nonce)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MineResult {
    Found { nonce: u64, attempts: u64 },
    Exhausted { attempts: u64 },
}

/// Draw seeded nonces until one hashes below the adjusted target or the
/// attempt budget runs out.
pub fn mine(
    block: &MiningBlock,
    d: &DifficultyParams,
    max_attempts: u64,
    rng: &mut ChaCha8Rng,
) -> MineResult {
    let threshold = adjusted_target(d, block.train_loss);
    if threshold.is_zero() {
        return MineResult::Exhausted {
            attempts: max_attempts,
        };
    }
    for attempt in 1..=max_attempts {
        let nonce = rng.next_u64();
        if block.hash_with_nonce(nonce) < threshold {
            return MineResult::Found {
                nonce,
                attempts: attempt,
            };
        }
    }
    MineResult::Exhausted {
        attempts: max_attempts,
    }
}

/// Hash scaled back up by e^(+alpha * loss) in Q32.32, widened to 320
/// bits: the comparison key for winner selection.
fn scaled_hash_key(hash: &U256, alpha: f64, loss: f64) -> [u64; 5] {
    let factor_f = (alpha * loss.max(0.0)).exp() * (1u64 << 32) as f64;
    let factor = if factor_f >= u64::MAX as f64 {
        u64::MAX
    } else {
        factor_f.round() as u64
    };
    let mut key = hash.mul_wide(factor);
    key.reverse(); // most-significant first so array compare works
    key
}

/// Lowest adjusted hash value wins: minimize hash / e^(-alpha * loss),
/// ties broken by the lowest miner id.
pub fn select_winner<'a>(
    blocks: impl IntoIterator<Item = &'a MiningBlock>,
    d: &DifficultyParams,
) -> Option<&'a MiningBlock> {
    blocks
        .into_iter()
        .map(|b| {
            let key = scaled_hash_key(&b.block_hash(), d.alpha, b.train_loss);
            (key, b.miner, b)
        })
        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, _, b)| b)
}

/// Network-side block verification:
/// (a) the nonce satisfies the loss-adjusted target,
/// (b) the advertised model root matches the published update, and
/// (c) the claimed loss survives re-evaluation on the shared slice.
pub fn verify_block(
    block: &MiningBlock,
    published: Option<&UpdateRecord>,
    d: &DifficultyParams,
    val_set: &DatasetPartition,
    loss_tolerance: f64,
    chunk_bytes: usize,
) -> bool {
    let Some(update) = published else {
        return false;
    };
    if block.block_hash() >= adjusted_target(d, block.train_loss) {
        return false;
    }
    let Ok(chunked) = crate::ledger::chunk_model(&update.params, chunk_bytes) else {
        return false;
    };
    let Ok(root) = crate::ledger::merkle_root(&chunked.chunks) else {
        return false;
    };
    if root != block.model_root {
        return false;
    }
    match evaluate_loss(&update.params, val_set) {
        Ok(loss) => (loss - block.train_loss).abs() <= loss_tolerance,
        Err(_) => false,
    }
}

/// Split a fixed integer reward proportionally to each participant's
/// leave-one-out accuracy contribution, flooring shares and sending the
/// remainder to the round winner. Sums to exactly `total_reward`.
pub fn distribute_rewards(
    round_updates: &[UpdateRecord],
    winner: NodeId,
    total_reward: u64,
    val_set: &DatasetPartition,
) -> Result<BTreeMap<NodeId, u64>, PoflError> {
    if round_updates.is_empty() {
        return Err(PoflError::NoParticipants);
    }
    let mut rewards: BTreeMap<NodeId, u64> = BTreeMap::new();
    if round_updates.len() == 1 {
        rewards.insert(round_updates[0].node, total_reward);
        return Ok(rewards);
    }

    let acc_with = evaluate(&fedavg(round_updates.iter())?, val_set)?;
    let mut contributions: Vec<(NodeId, f64)> = Vec::with_capacity(round_updates.len());
    for leave_out in round_updates {
        let rest = round_updates.iter().filter(|u| u.node != leave_out.node);
        let acc_without = evaluate(&fedavg(rest)?, val_set)?;
        contributions.push((leave_out.node, (acc_with - acc_without).max(0.0)));
    }

    // When nobody improved the aggregate (e.g. identical updates), the
    // split degenerates to uniform shares.
    let total_contribution: f64 = contributions.iter().map(|(_, c)| c).sum();
    let weight_of = |c: f64| {
        if total_contribution > 0.0 {
            c / total_contribution
        } else {
            1.0 / contributions.len() as f64
        }
    };
    let mut distributed = 0u64;
    for (node, c) in &contributions {
        let share = ((total_reward as f64) * weight_of(*c)).floor() as u64;
        rewards.insert(*node, share);
        distributed += share;
    }
    // Flooring leaves a zero-sum remainder; it goes to the winner.
    *rewards.entry(winner).or_insert(0) += total_reward - distributed;
    Ok(rewards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{seeded_rng, KeyStore};
    use crate::learning::{synthetic_dataset, ModelParams, SyntheticSpec};
    use std::sync::Arc;

    fn block(loss: f64, miner: NodeId) -> MiningBlock {
        MiningBlock {
            prev_hash: sha256(b"prev"),
            model_root: sha256(b"root"),
            train_loss: loss,
            miner,
            nonce: 0,
            noised_params_ref: sha256(b"root"),
        }
    }

    #[test]
    fn zero_alpha_never_eases() {
        let d = DifficultyParams {
            target: U256::pow2(200),
            alpha: 0.0,
        };
        for loss in [0.0, 0.5, 3.0, 100.0] {
            assert_eq!(adjusted_target(&d, loss), d.target);
        }
    }

    #[test]
    fn zero_loss_keeps_full_target() {
        let d = DifficultyParams {
            target: U256::MAX,
            alpha: 2.5,
        };
        assert_eq!(adjusted_target(&d, 0.0), d.target);
    }

    // Arbitrary-precision oracle: e^(-ln 2) is exactly 1/2, so the
    // adjusted target must be floor(target / 2) up to one ulp of the
    // Q0.63 factor.
    #[test]
    fn ln_two_loss_halves_the_target() {
        let targets = [U256::MAX, U256::pow2(255), U256::pow2(130)];
        for target in targets {
            let d = DifficultyParams { target, alpha: 1.0 };
            let adjusted = adjusted_target(&d, std::f64::consts::LN_2);
            let expected = target.shr_small(1);
            // one ulp of the factor scales to target >> 63
            let ulp = target.shr_small(63);
            let (lo, hi) = (adjusted.min(expected), adjusted.max(expected));
            // hi - lo <= ulp, checked limb-wise via subtraction
            let mut borrow = 0i128;
            let mut diff = [0u64; 4];
            for i in 0..4 {
                let d = hi.0[i] as i128 - lo.0[i] as i128 - borrow;
                if d < 0 {
                    diff[i] = (d + (1i128 << 64)) as u64;
                    borrow = 1;
                } else {
                    diff[i] = d as u64;
                    borrow = 0;
                }
            }
            assert!(U256(diff) <= ulp, "diff {diff:?} exceeds one factor ulp");
        }
    }

    #[test]
    fn adjusted_target_monotone_in_loss() {
        let d = DifficultyParams {
            target: U256::MAX,
            alpha: 1.5,
        };
        let mut prev = adjusted_target(&d, 0.0);
        for step in 1..50 {
            let next = adjusted_target(&d, step as f64 * 0.2);
            assert!(next <= prev, "loss step {step}");
            prev = next;
        }
        // Extreme loss drives the target to zero: mining impossible.
        assert!(adjusted_target(&d, 400.0).is_zero());
    }

    #[test]
    fn max_target_wins_on_first_nonce() {
        let d = DifficultyParams {
            target: U256::MAX,
            alpha: 0.0,
        };
        let mut rng = seeded_rng(1, 0, "mine");
        match mine(&block(0.5, 1), &d, 10, &mut rng) {
            MineResult::Found { attempts, .. } => assert_eq!(attempts, 1),
            other => panic!("expected immediate success, got {other:?}"),
        }
    }

    #[test]
    fn zero_target_exhausts() {
        let d = DifficultyParams {
            target: U256::ZERO,
            alpha: 0.0,
        };
        let mut rng = seeded_rng(1, 0, "mine");
        assert_eq!(
            mine(&block(0.0, 1), &d, 5, &mut rng),
            MineResult::Exhausted { attempts: 5 }
        );
    }

    // Bernoulli estimate oracle: per-attempt success probability equals
    // adjusted_target / 2^256 within three standard errors.
    #[test]
    fn mining_success_rate_matches_target_fraction() {
        let d = DifficultyParams {
            target: U256::pow2(248), // p = 2^-8
            alpha: 0.0,
        };
        let p = 2f64.powi(-8);
        let mut rng = seeded_rng(7, 3, "mine");
        let b = block(0.0, 3);
        let mut total_attempts = 0u64;
        let successes = 1000u64;
        for _ in 0..successes {
            match mine(&b, &d, 1_000_000, &mut rng) {
                MineResult::Found { attempts, .. } => total_attempts += attempts,
                MineResult::Exhausted { .. } => panic!("unexpected exhaustion"),
            }
        }
        let p_hat = successes as f64 / total_attempts as f64;
        let se = (p * (1.0 - p) / total_attempts as f64).sqrt();
        assert!(
            (p_hat - p).abs() < 3.0 * se,
            "p_hat {p_hat}, p {p}, se {se}"
        );
    }

    #[test]
    fn single_block_wins() {
        let d = DifficultyParams {
            target: U256::MAX,
            alpha: 2.0,
        };
        let b = block(0.3, 4);
        assert_eq!(select_winner([&b], &d).unwrap(), &b);
        assert!(select_winner([], &d).is_none());
    }

    #[test]
    fn equal_hash_lower_loss_wins() {
        // The scaling is monotone: for the same raw hash a lower loss
        // gives a strictly smaller key.
        let h = U256::from_be_bytes(sha256(b"same").as_bytes());
        let low = scaled_hash_key(&h, 2.0, 0.1);
        let high = scaled_hash_key(&h, 2.0, 0.9);
        assert!(low < high);
    }

    // Brute-force comparison oracle in the log domain.
    #[test]
    fn winner_matches_log_domain_oracle() {
        let d = DifficultyParams {
            target: U256::MAX,
            alpha: 1.7,
        };
        let blocks: Vec<MiningBlock> = [(0.1, 0u64), (0.45, 1), (0.9, 2), (0.2, 3)]
            .iter()
            .map(|&(loss, miner)| {
                let mut b = block(loss, miner);
                b.nonce = 1000 + miner;
                b
            })
            .collect();
        let winner = select_winner(blocks.iter(), &d).unwrap();

        let log_key = |b: &MiningBlock| {
            let h = b.block_hash();
            // interpret the top 128 bits as an f64 for the oracle
            let top = (h.0[3] as f64) * 2f64.powi(64) + h.0[2] as f64;
            top.ln() + d.alpha * b.train_loss
        };
        let oracle = blocks
            .iter()
            .min_by(|a, b| log_key(a).partial_cmp(&log_key(b)).unwrap())
            .unwrap();
        assert_eq!(winner.miner, oracle.miner);
    }

    fn val_view() -> DatasetPartition {
        let spec = SyntheticSpec {
            classes: 3,
            dims: 4,
            per_class: 12,
            spread: 0.15,
            seed: 33,
        };
        DatasetPartition::full(Arc::new(synthetic_dataset(&spec)))
    }

    fn published_update(node: NodeId, vs: &DatasetPartition) -> (UpdateRecord, f64) {
        let keys = KeyStore::new(0);
        let mut rng = seeded_rng(50 + node, node, "init");
        let params = ModelParams::new_mlp(&[4, 5, 3], &mut rng);
        let loss = evaluate_loss(&params, vs).unwrap();
        (UpdateRecord::new(node, params, 10, loss, 0.0, &keys), loss)
    }

    #[test]
    fn honest_block_verifies_and_lies_fail() {
        let vs = val_view();
        let (update, loss) = published_update(2, &vs);
        let d = DifficultyParams {
            target: U256::MAX,
            alpha: 0.5,
        };
        let chunked = crate::ledger::chunk_model(&update.params, 64).unwrap();
        let root = crate::ledger::merkle_root(&chunked.chunks).unwrap();
        let mut b = MiningBlock {
            prev_hash: sha256(b"tip"),
            model_root: root,
            train_loss: loss,
            miner: 2,
            nonce: 0,
            noised_params_ref: root,
        };
        let mut rng = seeded_rng(4, 2, "mine");
        let MineResult::Found { nonce, .. } = mine(&b, &d, 100_000, &mut rng) else {
            panic!("mining failed under max target");
        };
        b.nonce = nonce;
        assert!(verify_block(&b, Some(&update), &d, &vs, 0.05, 64));

        // Claimed loss lowered to ease the target: re-evaluation catches it.
        let mut lying = b.clone();
        lying.train_loss = loss - 0.5;
        let mut rng = seeded_rng(5, 2, "mine");
        if let MineResult::Found { nonce, .. } = mine(&lying, &d, 100_000, &mut rng) {
            lying.nonce = nonce;
        }
        assert!(!verify_block(&lying, Some(&update), &d, &vs, 0.05, 64));

        // Missing published update.
        assert!(!verify_block(&b, None, &d, &vs, 0.05, 64));
    }

    // Direct hash recomputation oracle: a nonce off by one fails the
    // threshold check with overwhelming probability.
    #[test]
    fn nonce_off_by_one_fails() {
        let vs = val_view();
        let (update, loss) = published_update(3, &vs);
        // Tight target (p = 2^-10) so a neighboring nonce's hash almost
        // surely misses it.
        let d = DifficultyParams {
            target: U256::pow2(246),
            alpha: 0.0,
        };
        let chunked = crate::ledger::chunk_model(&update.params, 64).unwrap();
        let root = crate::ledger::merkle_root(&chunked.chunks).unwrap();
        let mut b = MiningBlock {
            prev_hash: sha256(b"tip"),
            model_root: root,
            train_loss: loss,
            miner: 3,
            nonce: 0,
            noised_params_ref: root,
        };
        let mut rng = seeded_rng(6, 3, "mine");
        let MineResult::Found { nonce, .. } = mine(&b, &d, 10_000_000, &mut rng) else {
            panic!("mining failed");
        };
        b.nonce = nonce;
        assert!(verify_block(&b, Some(&update), &d, &vs, 0.05, 64));
        b.nonce = nonce.wrapping_add(1);
        assert!(!verify_block(&b, Some(&update), &d, &vs, 0.05, 64));
    }

    #[test]
    fn single_participant_takes_whole_reward() {
        let vs = val_view();
        let (update, _) = published_update(1, &vs);
        let rewards = distribute_rewards(&[update], 1, 1_000_000, &vs).unwrap();
        assert_eq!(rewards.get(&1), Some(&1_000_000));
    }

    #[test]
    fn identical_updates_share_equally() {
        let vs = val_view();
        let keys = KeyStore::new(0);
        let mut rng = seeded_rng(60, 0, "init");
        let params = ModelParams::new_mlp(&[4, 5, 3], &mut rng);
        let a = UpdateRecord::new(0, params.clone(), 10, 0.1, 0.0, &keys);
        let b = UpdateRecord::new(1, params, 10, 0.1, 0.0, &keys);
        let rewards = distribute_rewards(&[a, b], 0, 1_000, &vs).unwrap();
        // Identical models contribute identically (nothing), so the split
        // falls back to symmetry.
        assert_eq!(rewards.values().sum::<u64>(), 1_000);
        assert_eq!(rewards.get(&0), Some(&500));
        assert_eq!(rewards.get(&1), Some(&500));
    }

    // Independent leave-one-out recomputation oracle for 3 participants.
    #[test]
    fn rewards_match_leave_one_out_oracle() {
        let vs = val_view();
        let updates: Vec<UpdateRecord> = (0..3).map(|n| published_update(n, &vs).0).collect();
        let total = 999_983u64; // awkward total to exercise flooring
        let rewards = distribute_rewards(&updates, 2, total, &vs).unwrap();
        assert_eq!(rewards.values().sum::<u64>(), total);

        let acc_all = evaluate(&fedavg(updates.iter()).unwrap(), &vs).unwrap();
        let mut contributions = Vec::new();
        for i in 0..3 {
            let rest: Vec<&UpdateRecord> = updates
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, u)| u)
                .collect();
            let acc_without = evaluate(&fedavg(rest).unwrap(), &vs).unwrap();
            contributions.push((acc_all - acc_without).max(0.0));
        }
        let sum: f64 = contributions.iter().sum();
        if sum > 0.0 {
            let mut floor_sum = 0u64;
            for (i, c) in contributions.iter().enumerate() {
                let share = ((total as f64) * (c / sum)).floor() as u64;
                floor_sum += share;
                let got = rewards.get(&(i as NodeId)).copied().unwrap_or(0);
                if i as NodeId == 2 {
                    assert_eq!(got, share + (total - to_distribute(&contributions, total)));
                } else {
                    assert_eq!(got, share);
                }
            }
            assert!(floor_sum <= total);
        } else {
            // Degenerate round: uniform thirds plus remainder to winner 2.
            let third = total / 3;
            assert_eq!(rewards.get(&0), Some(&third));
            assert_eq!(rewards.get(&1), Some(&third));
            assert_eq!(rewards.get(&2), Some(&(total - 2 * third)));
        }
    }

    fn to_distribute(contributions: &[f64], total: u64) -> u64 {
        let sum: f64 = contributions.iter().sum();
        contributions
            .iter()
            .map(|c| ((total as f64) * (c / sum)).floor() as u64)
            .sum()
    }
}
