//! Wire payloads for simulated coordination traffic.
//!
//! Every message in a run is encoded to bytes before entering the
//! network and decoded on delivery, so size counters reflect real
//! serialized payloads and the external formats (proof records, PBFT
//! messages, update records) are exercised on every hop.

use crate::codec::{CodecError, Reader, Writer};
use crate::consensus::flpbft::PbftMessage;
use crate::consensus::pofl::MiningBlock;
use crate::consensus::poq::{AggregationProposal, QualityProof};
use crate::crypto::{Hash32, NodeId};
use crate::learning::{Aggregator, ModelParams, UpdateRecord};

/// Exact regional pre-aggregate in transit: shape, 128-bit fixed-point
/// sums, total sample count, and contributor count.
#[derive(Debug, Clone)]
pub struct WireAggregate {
    pub aggregator: Aggregator,
    pub participants: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub enum Payload {
    ModelDown {
        round: u64,
        model: ModelParams,
    },
    UpdateUp {
        round: u64,
        update: UpdateRecord,
        proof: Option<QualityProof>,
    },
    RegionalUp {
        round: u64,
        region: WireAggregate,
        proofs: Vec<QualityProof>,
    },
    Package {
        round: u64,
        updates: Vec<UpdateRecord>,
        proofs: Vec<QualityProof>,
    },
    RegionPackage {
        round: u64,
        regions: Vec<WireAggregate>,
        proofs: Vec<QualityProof>,
    },
    Proposal {
        round: u64,
        proposal: AggregationProposal,
    },
    Vote {
        round: u64,
        voter: NodeId,
        accept: bool,
    },
    Outcome {
        round: u64,
        committed: bool,
        model_root: Option<Hash32>,
    },
    MiningAnnounce {
        round: u64,
        block: MiningBlock,
    },
    Pbft {
        round: u64,
        msg: PbftMessage,
    },
    Gossip {
        round: u64,
        update: UpdateRecord,
        proof: Option<QualityProof>,
        forwarded: bool,
    },
}

fn put_model(w: &mut Writer, model: &ModelParams) {
    w.put_u32(model.layers.len() as u32);
    for layer in &model.layers {
        w.put_u32(layer.inputs as u32);
        w.put_u32(layer.outputs as u32);
    }
    w.put_raw(&model.to_canonical_bytes());
}

fn read_model(r: &mut Reader<'_>) -> Result<ModelParams, CodecError> {
    let n_layers = r.u32()? as usize;
    let mut shape = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let inputs = r.u32()? as usize;
        let outputs = r.u32()? as usize;
        shape.push((inputs, outputs));
    }
    let len: usize = shape.iter().map(|(i, o)| (i * o + o) * 8).sum();
    let raw = r.raw(len)?;
    ModelParams::from_canonical_bytes(&shape, raw).map_err(|e| CodecError::Invalid {
        offset: 0,
        reason: e.to_string(),
    })
}

fn put_update(w: &mut Writer, update: &UpdateRecord) {
    w.put_bytes(&update.encode());
}

fn read_update(r: &mut Reader<'_>) -> Result<UpdateRecord, CodecError> {
    UpdateRecord::decode(r.bytes()?)
}

fn put_proof_opt(w: &mut Writer, proof: &Option<QualityProof>) {
    match proof {
        Some(p) => {
            w.put_u8(1);
            w.put_raw(&p.encode());
        }
        None => {
            w.put_u8(0);
        }
    }
}

fn read_proof_opt(r: &mut Reader<'_>) -> Result<Option<QualityProof>, CodecError> {
    Ok(match r.u8()? {
        0 => None,
        _ => {
            let len = r.u32()? as usize;
            let mut body = Writer::new();
            body.put_u32(len as u32);
            body.put_raw(r.raw(len)?);
            Some(QualityProof::decode(&body.finish())?)
        }
    })
}

fn put_proofs(w: &mut Writer, proofs: &[QualityProof]) {
    w.put_u32(proofs.len() as u32);
    for p in proofs {
        w.put_raw(&p.encode());
    }
}

fn read_proofs(r: &mut Reader<'_>) -> Result<Vec<QualityProof>, CodecError> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let mut body = Writer::new();
        body.put_u32(len as u32);
        body.put_raw(r.raw(len)?);
        out.push(QualityProof::decode(&body.finish())?);
    }
    Ok(out)
}

fn put_aggregate(w: &mut Writer, agg: &WireAggregate) {
    let (shape, sums, total, contributors) = agg.aggregator.raw_parts();
    w.put_u32(shape.len() as u32);
    for &(i, o) in shape {
        w.put_u32(i as u32);
        w.put_u32(o as u32);
    }
    w.put_u32(sums.len() as u32);
    for &s in sums {
        w.put_raw(&(s as u128).to_be_bytes());
    }
    w.put_u64(total);
    w.put_u32(contributors as u32);
    w.put_u32(agg.participants.len() as u32);
    for p in &agg.participants {
        w.put_u64(*p);
    }
}

fn read_aggregate(r: &mut Reader<'_>) -> Result<WireAggregate, CodecError> {
    let n_layers = r.u32()? as usize;
    let mut shape = Vec::with_capacity(n_layers.min(1 << 10));
    for _ in 0..n_layers {
        let i = r.u32()? as usize;
        let o = r.u32()? as usize;
        shape.push((i, o));
    }
    let n_sums = r.u32()? as usize;
    let mut sums = Vec::with_capacity(n_sums.min(1 << 24));
    for _ in 0..n_sums {
        let raw: [u8; 16] = r.raw(16)?.try_into().unwrap();
        sums.push(u128::from_be_bytes(raw) as i128);
    }
    let total = r.u64()?;
    let contributors = r.u32()? as usize;
    let aggregator = Aggregator::from_raw_parts(shape, sums, total, contributors)
        .map_err(|e| CodecError::Invalid {
            offset: 0,
            reason: e.to_string(),
        })?;
    let n_participants = r.u32()? as usize;
    let mut participants = Vec::with_capacity(n_participants.min(1 << 16));
    for _ in 0..n_participants {
        participants.push(r.u64()?);
    }
    Ok(WireAggregate {
        aggregator,
        participants,
    })
}

fn put_block(w: &mut Writer, block: &MiningBlock) {
    w.put_hash(&block.prev_hash);
    w.put_hash(&block.model_root);
    w.put_f64(block.train_loss);
    w.put_u64(block.miner);
    w.put_u64(block.nonce);
    w.put_hash(&block.noised_params_ref);
}

fn read_block(r: &mut Reader<'_>) -> Result<MiningBlock, CodecError> {
    Ok(MiningBlock {
        prev_hash: r.hash()?,
        model_root: r.hash()?,
        train_loss: r.f64()?,
        miner: r.u64()?,
        nonce: r.u64()?,
        noised_params_ref: r.hash()?,
    })
}

fn put_proposal(w: &mut Writer, p: &AggregationProposal) {
    w.put_u64(p.round);
    w.put_u64(p.leader);
    w.put_u32(p.included.len() as u32);
    for n in &p.included {
        w.put_u64(*n);
    }
    w.put_hash(&p.model_root);
}

fn read_proposal(r: &mut Reader<'_>) -> Result<AggregationProposal, CodecError> {
    let round = r.u64()?;
    let leader = r.u64()?;
    let n = r.u32()? as usize;
    let mut included = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        included.push(r.u64()?);
    }
    Ok(AggregationProposal {
        round,
        leader,
        included,
        model_root: r.hash()?,
    })
}

impl Payload {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Payload::ModelDown { round, model } => {
                w.put_u8(0).put_u64(*round);
                put_model(&mut w, model);
            }
            Payload::UpdateUp {
                round,
                update,
                proof,
            } => {
                w.put_u8(1).put_u64(*round);
                put_update(&mut w, update);
                put_proof_opt(&mut w, proof);
            }
            Payload::RegionalUp {
                round,
                region,
                proofs,
            } => {
                w.put_u8(2).put_u64(*round);
                put_aggregate(&mut w, region);
                put_proofs(&mut w, proofs);
            }
            Payload::Package {
                round,
                updates,
                proofs,
            } => {
                w.put_u8(3).put_u64(*round);
                w.put_u32(updates.len() as u32);
                for u in updates {
                    put_update(&mut w, u);
                }
                put_proofs(&mut w, proofs);
            }
            Payload::RegionPackage {
                round,
                regions,
                proofs,
            } => {
                w.put_u8(4).put_u64(*round);
                w.put_u32(regions.len() as u32);
                for region in regions {
                    put_aggregate(&mut w, region);
                }
                put_proofs(&mut w, proofs);
            }
            Payload::Proposal { round, proposal } => {
                w.put_u8(5).put_u64(*round);
                put_proposal(&mut w, proposal);
            }
            Payload::Vote {
                round,
                voter,
                accept,
            } => {
                w.put_u8(6).put_u64(*round).put_u64(*voter).put_u8(*accept as u8);
            }
            Payload::Outcome {
                round,
                committed,
                model_root,
            } => {
                w.put_u8(7).put_u64(*round).put_u8(*committed as u8);
                match model_root {
                    Some(root) => {
                        w.put_u8(1);
                        w.put_hash(root);
                    }
                    None => {
                        w.put_u8(0);
                    }
                }
            }
            Payload::MiningAnnounce { round, block } => {
                w.put_u8(8).put_u64(*round);
                put_block(&mut w, block);
            }
            Payload::Pbft { round, msg } => {
                w.put_u8(9).put_u64(*round);
                w.put_bytes(&msg.encode());
            }
            Payload::Gossip {
                round,
                update,
                proof,
                forwarded,
            } => {
                w.put_u8(10).put_u64(*round).put_u8(*forwarded as u8);
                put_update(&mut w, update);
                put_proof_opt(&mut w, proof);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Payload, CodecError> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        let round = r.u64()?;
        let payload = match tag {
            0 => Payload::ModelDown {
                round,
                model: read_model(&mut r)?,
            },
            1 => Payload::UpdateUp {
                round,
                update: read_update(&mut r)?,
                proof: read_proof_opt(&mut r)?,
            },
            2 => Payload::RegionalUp {
                round,
                region: read_aggregate(&mut r)?,
                proofs: read_proofs(&mut r)?,
            },
            3 => {
                let n = r.u32()? as usize;
                let mut updates = Vec::with_capacity(n.min(1 << 16));
                for _ in 0..n {
                    updates.push(read_update(&mut r)?);
                }
                Payload::Package {
                    round,
                    updates,
                    proofs: read_proofs(&mut r)?,
                }
            }
            4 => {
                let n = r.u32()? as usize;
                let mut regions = Vec::with_capacity(n.min(1 << 10));
                for _ in 0..n {
                    regions.push(read_aggregate(&mut r)?);
                }
                Payload::RegionPackage {
                    round,
                    regions,
                    proofs: read_proofs(&mut r)?,
                }
            }
            5 => Payload::Proposal {
                round,
                proposal: read_proposal(&mut r)?,
            },
            6 => Payload::Vote {
                round,
                voter: r.u64()?,
                accept: r.u8()? != 0,
            },
            7 => {
                let committed = r.u8()? != 0;
                let model_root = match r.u8()? {
                    0 => None,
                    _ => Some(r.hash()?),
                };
                Payload::Outcome {
                    round,
                    committed,
                    model_root,
                }
            }
            8 => Payload::MiningAnnounce {
                round,
                block: read_block(&mut r)?,
            },
            9 => Payload::Pbft {
                round,
                msg: PbftMessage::decode(r.bytes()?)?,
            },
            10 => {
                let forwarded = r.u8()? != 0;
                Payload::Gossip {
                    round,
                    update: read_update(&mut r)?,
                    proof: read_proof_opt(&mut r)?,
                    forwarded,
                }
            }
            other => {
                return Err(CodecError::Invalid {
                    offset: 0,
                    reason: format!("unknown payload tag {other}"),
                })
            }
        };
        r.expect_end()?;
        Ok(payload)
    }

    pub fn round(&self) -> u64 {
        match self {
            Payload::ModelDown { round, .. }
            | Payload::UpdateUp { round, .. }
            | Payload::RegionalUp { round, .. }
            | Payload::Package { round, .. }
            | Payload::RegionPackage { round, .. }
            | Payload::Proposal { round, .. }
            | Payload::Vote { round, .. }
            | Payload::Outcome { round, .. }
            | Payload::MiningAnnounce { round, .. }
            | Payload::Pbft { round, .. }
            | Payload::Gossip { round, .. } => *round,
        }
    }
}
