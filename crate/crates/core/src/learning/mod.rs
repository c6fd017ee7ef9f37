//! Local training, evaluation, non-IID partitioning, and aggregation.
//!
//! Everything here is a pure function over value types: the consensus
//! modules consume training quality signals (losses, accuracies) that are
//! produced by genuinely training a small perceptron, so a "better model"
//! in a test is better because gradient descent made it so.

mod aggregate;
mod data;
mod model;
mod train;

pub use aggregate::{add_dp_noise, fedavg, AggError, Aggregator};
pub use data::{
    load_idx_dataset, partition_non_iid, synthetic_dataset, stratified_split, DataError,
    Dataset, DatasetPartition, SyntheticSpec,
};
pub use model::{LayerParams, ModelParams};
pub use train::{evaluate, evaluate_loss, local_train, loss_and_gradients, predict};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::crypto::{sha256, Hash32, KeyStore, NodeId, Signature};
use crate::codec::{CodecError, Reader, Writer};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("layer {layer}: expected {expected} inputs, got {got}")]
    ShapeMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("model and data dimensions differ: model takes {model}, data has {data}")]
    DimensionMismatch { model: usize, data: usize },
    #[error("empty dataset partition")]
    EmptyData,
    #[error("non-finite value produced during training (epoch {epoch})")]
    Diverged { epoch: u32 },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite parameter in model")]
    NonFiniteParams,
}

/// Hyperparameters for one local training call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(LearnError::InvalidConfig(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(LearnError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(LearnError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One participant's signed round contribution.
#[derive(Debug, Clone)]
pub struct UpdateRecord {
    pub node: NodeId,
    pub params: ModelParams,
    pub sample_count: u64,
    pub train_loss: f64,
    pub claimed_accuracy: f64,
    pub signature: Signature,
}

impl UpdateRecord {
    pub fn new(
        node: NodeId,
        params: ModelParams,
        sample_count: u64,
        train_loss: f64,
        claimed_accuracy: f64,
        keys: &KeyStore,
    ) -> Self {
        let mut rec = UpdateRecord {
            node,
            params,
            sample_count,
            train_loss,
            claimed_accuracy,
            signature: Signature::default(),
        };
        rec.signature = keys.sign(node, &rec.signing_digest().0);
        rec
    }

    /// Digest covering every field the signature protects.
    pub fn signing_digest(&self) -> Hash32 {
        let mut w = Writer::new();
        w.put_u64(self.node);
        w.put_hash(&sha256(&self.params.to_canonical_bytes()));
        w.put_u64(self.sample_count);
        w.put_f64(self.train_loss);
        w.put_f64(self.claimed_accuracy);
        sha256(&w.finish())
    }

    /// Re-sign with the given node's own key (used after tampering by an
    /// adversary, which cannot forge anyone else's key).
    pub fn resign(&mut self, keys: &KeyStore) {
        self.signature = keys.sign(self.node, &self.signing_digest().0);
    }

    pub fn verify_signature(&self, keys: &KeyStore) -> bool {
        keys.verify(self.node, &self.signing_digest().0, &self.signature)
    }

    /// Wire encoding: node(8) | shape | params | sample_count(8) |
    /// loss(8) | accuracy(8) | signature(32), all big-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u64(self.node);
        w.put_u32(self.params.layers.len() as u32);
        for layer in &self.params.layers {
            w.put_u32(layer.inputs as u32);
            w.put_u32(layer.outputs as u32);
        }
        w.put_raw(&self.params.to_canonical_bytes());
        w.put_u64(self.sample_count);
        w.put_f64(self.train_loss);
        w.put_f64(self.claimed_accuracy);
        w.put_signature(&self.signature);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let node = r.u64()?;
        let n_layers = r.u32()? as usize;
        let mut shape = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let inputs = r.u32()? as usize;
            let outputs = r.u32()? as usize;
            shape.push((inputs, outputs));
        }
        let param_bytes: usize = shape
            .iter()
            .map(|(i, o)| (i * o + o) * 8)
            .sum();
        let raw = r.raw(param_bytes)?;
        let params = ModelParams::from_canonical_bytes(&shape, raw).map_err(|e| {
            CodecError::Invalid {
                offset: 0,
                reason: e.to_string(),
            }
        })?;
        let sample_count = r.u64()?;
        let train_loss = r.f64()?;
        let claimed_accuracy = r.f64()?;
        let signature = r.signature()?;
        r.expect_end()?;
        Ok(UpdateRecord {
            node,
            params,
            sample_count,
            train_loss,
            claimed_accuracy,
            signature,
        })
    }
}

/// Standard normal draw via Box-Muller, fully determined by the stream.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // gen::<f64>() is in [0,1); shift to (0,1] so ln() is finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
