//! The experiment engine: turns a config into a full simulated run.
//!
//! A run is a sequence of rounds on the discrete-event loop. Each round:
//! model distribution, local training (with scripted adversaries), a
//! collection window that gathers signed updates (late arrivals roll into
//! the next round), the bound consensus protocol, and on commit the
//! ledger/DHT/cache/audit writes plus reputation and reward updates.
//! Every message is serialized wire bytes over the simulated network, so
//! per-kind counters and byte totals are real.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::consensus::flpbft::{
    detect_byzantine, CommitteeConfig, PbftMessage, Replica, ReplicaAction, RoundContext,
};
use crate::consensus::pofl::{
    distribute_rewards, mine, select_winner, verify_block, DifficultyParams, MineResult,
    MiningBlock, U256,
};
use crate::consensus::poq::{
    build_proposal, select_leader, submit_proof, tally_votes, validator_vote,
    AggregationProposal, PoqConfig, QualityProof,
};
use crate::consensus::{verify_round_updates, VerifiedUpdate};
use crate::crypto::{derive_u64, seeded_rng, Hash32, KeyStore, NodeId};
use crate::harness::config::{ConfigErrors, ConsensusKind, ExperimentConfig};
use crate::harness::metrics::{MetricsRow, MsgKind};
use crate::harness::wire::{Payload, WireAggregate};
use crate::learning::{
    evaluate, evaluate_loss, fedavg, local_train, partition_non_iid, stratified_split,
    add_dp_noise, Aggregator, DataError, Dataset, DatasetPartition, LearnError, ModelParams,
    SyntheticSpec, TrainConfig, UpdateRecord,
};
use crate::ledger::{
    chunk_model, merkle_root, AuditLog, Chain, Dht, DhtConfig, LedgerError, ModelCache,
    OnChainRecord, RoundAuditRecord,
};
use crate::simnet::{EventLabel, Message, NetError, NetworkConfig, Partition, Simulator};
use crate::topology::{build_topology, RoutingPlan, TopologyError, TopologyKind};
use crate::trust::{
    admit, apply_adversary, AdmissionContext, AdmissionPolicy, AdversaryBehavior, Candidate,
    ReputationTable, RoundOutcome,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigErrors),
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("dataset: {0}")]
    Data(#[from] DataError),
    #[error("learning: {0}")]
    Learn(#[from] LearnError),
    #[error("network: {0}")]
    Net(#[from] NetError),
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
}

/// Everything a finished run leaves behind.
pub struct RunArtifacts {
    pub rows: Vec<MetricsRow>,
    pub chain: Chain,
    pub audit: AuditLog,
    pub final_model: ModelParams,
    pub final_root: Hash32,
    pub reputation: Vec<crate::trust::ReputationScore>,
    pub rewards_total: BTreeMap<NodeId, u64>,
    pub events_processed: usize,
}

#[derive(Debug, Clone)]
enum Ev {
    RoundStart(u64),
    TrainDone { round: u64, node: NodeId },
    Deliver(Message),
    WindowClose(u64),
    ConsensusStart(u64),
    AnnounceBlock { round: u64, miner: NodeId },
    MiningDeadline(u64),
    PbftTimeout { round: u64, node: NodeId, view: u64 },
    Crash(NodeId),
    RoundEnd(u64),
}

impl EventLabel for Ev {
    fn label(&self) -> String {
        match self {
            Ev::RoundStart(r) => format!("round-start:{r}"),
            Ev::TrainDone { round, node } => format!("train-done:{round}:{node}"),
            Ev::Deliver(m) => format!("deliver:{}->{}:{}b", m.src, m.dst, m.size_bytes),
            Ev::WindowClose(r) => format!("window-close:{r}"),
            Ev::ConsensusStart(r) => format!("consensus-start:{r}"),
            Ev::AnnounceBlock { round, miner } => format!("announce:{round}:{miner}"),
            Ev::MiningDeadline(r) => format!("mining-deadline:{r}"),
            Ev::PbftTimeout { round, node, view } => {
                format!("pbft-timeout:{round}:{node}:v{view}")
            }
            Ev::Crash(n) => format!("crash:{n}"),
            Ev::RoundEnd(r) => format!("round-end:{r}"),
        }
    }
}

struct NodeState {
    id: NodeId,
    alive: bool,
    admitted: bool,
    join_round: u64,
    rejected_reason: Option<String>,
    partition: DatasetPartition,
    local_test: DatasetPartition,
    byzantine: Option<AdversaryBehavior>,
}

#[derive(Default)]
struct RoundState {
    round: u64,
    start_ms: u64,
    window_close_ms: u64,
    end_ms: u64,
    committee: Vec<NodeId>,
    /// Published updates that made the window, by origin node.
    pool: BTreeMap<NodeId, UpdateRecord>,
    proofs: BTreeMap<NodeId, QualityProof>,
    /// Which origins each node has seen (gossip bookkeeping).
    seen: BTreeMap<NodeId, BTreeSet<NodeId>>,
    /// Regional exact aggregates received by the root, by aggregator id.
    regions: BTreeMap<NodeId, WireAggregate>,
    verified: Option<Rc<Vec<VerifiedUpdate>>>,
    proposal: Option<AggregationProposal>,
    proposal_model: Option<ModelParams>,
    votes: BTreeMap<NodeId, bool>,
    /// Solved blocks awaiting their announce time.
    solved: BTreeMap<NodeId, MiningBlock>,
    mined: BTreeMap<NodeId, MiningBlock>,
    replicas: BTreeMap<NodeId, Replica>,
    pbft_model: Option<ModelParams>,
    pbft_root: Option<Hash32>,
    pbft_max_view: u64,
    /// Rotated starting view for this round's committee.
    pbft_base_view: u64,
    suspects: BTreeSet<NodeId>,
    committed: bool,
    committed_root: Option<Hash32>,
    committed_score: Option<f64>,
    committed_at_ms: Option<u64>,
    participants: Vec<NodeId>,
    rewards: BTreeMap<NodeId, u64>,
    msgs_at_start: BTreeMap<String, u64>,
    bytes_at_start: u64,
    window_open: bool,
}

struct World {
    cfg: ExperimentConfig,
    consensus: ConsensusKind,
    poq_cfg: PoqConfig,
    difficulty: DifficultyParams,
    keys: KeyStore,
    plan: RoutingPlan,
    nodes: BTreeMap<NodeId, NodeState>,
    dead_infra: BTreeSet<NodeId>,
    /// Updates that arrived after their round's window; they roll into
    /// the next round's pool.
    late_buffer: BTreeMap<NodeId, (UpdateRecord, Option<QualityProof>)>,
    val_set: DatasetPartition,
    global_model: ModelParams,
    global_root: Hash32,
    chain: Chain,
    audit: AuditLog,
    dht: Dht,
    cache: ModelCache,
    reputation: ReputationTable,
    rewards_total: BTreeMap<NodeId, u64>,
    rows: Vec<MetricsRow>,
    round: RoundState,
    msg_counter: BTreeMap<String, u64>,
    done: bool,
}

type Sim = Simulator<Ev>;

const CHUNK_BYTES: usize = crate::ledger::DEFAULT_CHUNK_BYTES;

impl World {
    fn new(cfg: &ExperimentConfig) -> Result<(Sim, World), HarnessError> {
        cfg.validate()?;
        let consensus = cfg.consensus_kind().expect("validated");
        let seed = cfg.experiment.seed;
        let n = cfg.experiment.nodes;

        let dataset = load_dataset(cfg)?;
        let full = DatasetPartition::full(Arc::clone(&dataset));
        let (val_set, train_view) = stratified_split(&full, cfg.dataset.val_per_class, seed ^ 0x5eed);
        let partitions = partition_non_iid(
            &train_view,
            n as usize,
            cfg.dataset.classes_per_node,
            seed,
        )?;

        let trainers: Vec<NodeId> = (0..n).collect();
        let plan = build_topology(cfg.topology_kind().expect("validated"), &trainers, seed)?;

        let keys = KeyStore::new(seed);
        let adversary = cfg.adversary_spec().expect("validated");
        let byzantine = adversary.select_byzantine(&trainers);

        let joins: BTreeMap<NodeId, u64> = cfg
            .schedule
            .joins
            .iter()
            .map(|j| (j.node, j.round))
            .collect();

        let mut nodes = BTreeMap::new();
        for (id, partition) in trainers.iter().zip(partitions) {
            let holdout = ((partition.sample_count() as f64 * cfg.dataset.local_test_fraction)
                / partition.assigned_classes.len().max(1) as f64)
                .round() as usize;
            let (local_test, train_part) = stratified_split(&partition, holdout.max(1), seed ^ id);
            nodes.insert(
                *id,
                NodeState {
                    id: *id,
                    alive: true,
                    admitted: false,
                    join_round: joins.get(id).copied().unwrap_or(1),
                    rejected_reason: None,
                    partition: train_part,
                    local_test,
                    byzantine: byzantine.contains(id).then_some(adversary.behavior),
                },
            );
        }

        let model_widths = [dataset.dims, cfg.training.hidden, dataset.num_classes];
        let mut init_rng = seeded_rng(seed, u64::MAX, "global-init");
        let global_model = ModelParams::new_mlp(&model_widths, &mut init_rng);
        let global_root = model_root_of(&global_model)?;

        let net = NetworkConfig {
            base_latency_ms: cfg.network.base_latency_ms,
            jitter_ms: cfg.network.jitter_ms,
            drop_probability: cfg.network.drop_probability,
            partitions: cfg
                .network
                .partitions
                .iter()
                .map(|p| Partition {
                    side_a: p.side_a.iter().copied().collect(),
                    side_b: p.side_b.iter().copied().collect(),
                    start_ms: p.start_ms,
                    end_ms: p.end_ms,
                })
                .collect(),
            seed,
        };
        let mut sim: Sim = Simulator::new(net)?;
        for node in plan.all_nodes() {
            sim.register_node(node);
        }

        let poq_cfg = PoqConfig {
            accuracy_tolerance: cfg.consensus.accuracy_tolerance,
            claim_tolerance: cfg.consensus.claim_tolerance,
            exclusion_margin: cfg.consensus.exclusion_margin,
            chunk_bytes: CHUNK_BYTES,
            verification_enabled: cfg.consensus.verification_enabled,
        };
        let difficulty = DifficultyParams {
            target: if cfg.consensus.target_shift == 0 {
                U256::MAX
            } else {
                U256::pow2(255 - (cfg.consensus.target_shift - 1))
            },
            alpha: cfg.consensus.alpha,
        };

        let mut cache = ModelCache::new(8);
        cache.put(global_root, global_model.clone());

        let world = World {
            cfg: cfg.clone(),
            consensus,
            poq_cfg,
            difficulty,
            keys,
            plan,
            nodes,
            dead_infra: BTreeSet::new(),
            late_buffer: BTreeMap::new(),
            val_set,
            global_model,
            global_root,
            chain: Chain::new(),
            audit: AuditLog::new(),
            dht: Dht::new(DhtConfig {
                replicas: 3,
                chunk_bytes: CHUNK_BYTES,
            }),
            cache,
            reputation: ReputationTable::new(),
            rewards_total: BTreeMap::new(),
            rows: Vec::new(),
            round: RoundState::default(),
            msg_counter: BTreeMap::new(),
            done: false,
        };
        for crash in &cfg.schedule.crashes {
            sim.schedule_at(crash.at_ms, Ev::Crash(crash.node));
        }
        Ok((sim, world))
    }

    fn seed(&self) -> u64 {
        self.cfg.experiment.seed
    }

    fn alive(&self, node: NodeId) -> bool {
        !self.dead_infra.contains(&node)
            && self.nodes.get(&node).map(|n| n.alive).unwrap_or(true)
    }

    fn extra_delay(&self, node: NodeId) -> u64 {
        self.cfg
            .schedule
            .delays
            .iter()
            .find(|d| d.node == node)
            .map(|d| d.extra_ms)
            .unwrap_or(0)
    }

    fn send(&mut self, sim: &mut Sim, kind: MsgKind, src: NodeId, dst: NodeId, payload: &Payload) {
        if !self.alive(src) || self.done {
            return;
        }
        let bytes = payload.encode();
        if sim.send(src, dst, bytes, Ev::Deliver).is_ok() {
            *self
                .msg_counter
                .entry(kind.label().to_string())
                .or_insert(0) += 1;
        }
    }

    fn active_trainers(&self, round: u64) -> Vec<NodeId> {
        self.plan
            .trainers
            .iter()
            .copied()
            .filter(|id| {
                let n = &self.nodes[id];
                n.admitted && n.alive && n.join_round <= round
            })
            .collect()
    }

    // ------------------------------------------------------------------
    // Round lifecycle
    // ------------------------------------------------------------------

    fn on_round_start(&mut self, sim: &mut Sim, round: u64) {
        self.admit_joiners(round);

        // Decentralized overlays are rebuilt every round.
        if let TopologyKind::Decentralized { overlay_degree } = self.plan.kind {
            if let Ok(plan) = build_topology(
                TopologyKind::Decentralized { overlay_degree },
                &self.plan.trainers,
                self.seed().wrapping_add(round),
            ) {
                self.plan = plan;
            }
        }

        let start = sim.now();
        let window_close = start + self.cfg.experiment.collection_window_ms;
        let end = window_close + self.cfg.experiment.consensus_window_ms;
        self.round = RoundState {
            round,
            start_ms: start,
            window_close_ms: window_close,
            end_ms: end,
            committee: Vec::new(),
            msgs_at_start: self.msg_counter.clone(),
            bytes_at_start: sim.stats.bytes_sent,
            window_open: true,
            ..Default::default()
        };
        self.round.committee = self.committee_for(round);

        // Updates that missed the previous window roll into this round.
        for (node, (update, proof)) in std::mem::take(&mut self.late_buffer) {
            self.round.seen.entry(node).or_default().insert(node);
            self.round.pool.insert(node, update);
            if let Some(p) = proof {
                self.round.proofs.insert(node, p);
            }
        }

        sim.schedule_at(window_close, Ev::WindowClose(round));
        if matches!(self.plan.kind, TopologyKind::Hierarchical { .. }) {
            // The root merge waits out regional delivery latency.
            let grace = self.cfg.network.base_latency_ms + self.cfg.network.jitter_ms + 1;
            sim.schedule_at(window_close + grace, Ev::ConsensusStart(round));
        }
        if self.consensus == ConsensusKind::Pofl {
            sim.schedule_at(
                window_close + self.cfg.consensus.mining_window_ms,
                Ev::MiningDeadline(round),
            );
        }
        sim.schedule_at(end, Ev::RoundEnd(round));

        // Model distribution down the coordination structure.
        let model = self.global_model.clone();
        let payload = Payload::ModelDown {
            round,
            model: model.clone(),
        };
        match self.plan.kind {
            TopologyKind::Centralized => {
                let agg = self.plan.aggregator.expect("centralized has aggregator");
                for node in self.active_trainers(round) {
                    self.send(sim, MsgKind::ModelDown, agg, node, &payload);
                }
            }
            TopologyKind::Hierarchical { .. } => {
                let root = self.plan.root.expect("hierarchical has root");
                for cluster in self.plan.clusters.clone() {
                    self.send(sim, MsgKind::ModelDownGlobal, root, cluster.aggregator, &payload);
                }
            }
            TopologyKind::Decentralized { .. } => {
                // Peers already hold the committed global model; training
                // starts directly.
                for node in self.active_trainers(round) {
                    let delay = self.cfg.training.train_duration_ms + self.extra_delay(node);
                    sim.schedule(Ev::TrainDone { round, node }, delay);
                }
            }
        }
    }

    fn committee_for(&self, round: u64) -> Vec<NodeId> {
        match self.plan.kind {
            TopologyKind::Hierarchical { .. } => self.plan.consensus_committee(),
            _ => self
                .plan
                .trainers
                .iter()
                .copied()
                .filter(|id| {
                    let n = &self.nodes[id];
                    n.admitted && n.join_round <= round && !self.reputation.is_barred(*id)
                })
                .collect(),
        }
    }

    fn admit_joiners(&mut self, round: u64) {
        let members: BTreeSet<NodeId> = self
            .nodes
            .values()
            .filter(|n| n.admitted)
            .map(|n| n.id)
            .collect();
        let policy = self.cfg.admission_policy().expect("validated");
        let joiners: Vec<NodeId> = self
            .nodes
            .values()
            .filter(|n| !n.admitted && n.rejected_reason.is_none() && n.join_round == round)
            .map(|n| n.id)
            .collect();
        for id in joiners {
            let candidate = self.candidate_for(id, &members, &policy);
            let verdict = {
                let ctx = AdmissionContext {
                    keys: &self.keys,
                    members: &members,
                };
                admit(&candidate, &policy, &ctx)
            };
            let node = self.nodes.get_mut(&id).expect("known node");
            // Founding members bootstrap a consortium: nobody exists yet
            // to sign their onboarding.
            let founding = matches!(policy, AdmissionPolicy::Consortium { .. })
                && round == 1
                && members.is_empty();
            match verdict {
                crate::trust::AdmissionVerdict::Accepted => node.admitted = true,
                crate::trust::AdmissionVerdict::Rejected(_) if founding => node.admitted = true,
                crate::trust::AdmissionVerdict::Rejected(reason) => {
                    node.rejected_reason = Some(reason)
                }
            }
        }
    }

    fn candidate_for(
        &self,
        id: NodeId,
        members: &BTreeSet<NodeId>,
        policy: &AdmissionPolicy,
    ) -> Candidate {
        let mut candidate = Candidate {
            node: id,
            stake: self.cfg.trust.node_stake,
            approvals: Vec::new(),
            role_cert: Some(self.cfg.trust.node_role.clone()),
        };
        if let AdmissionPolicy::Consortium { approvers_required } = policy {
            let msg = Candidate::approval_message(id);
            candidate.approvals = members
                .iter()
                .take(*approvers_required)
                .map(|&m| (m, self.keys.sign(m, &msg)))
                .collect();
        }
        candidate
    }

    fn on_train_done(&mut self, sim: &mut Sim, round: u64, node: NodeId) {
        if round != self.round.round || !self.alive(node) || self.done {
            return;
        }
        let state = &self.nodes[&node];
        if !state.admitted {
            return;
        }
        let slice = {
            let mut rng = seeded_rng(self.seed(), node, &format!("slice-{round}"));
            state
                .partition
                .seeded_slice(self.cfg.training.round_sample, &mut rng)
        };
        if slice.sample_count() == 0 {
            return;
        }
        let train_cfg = TrainConfig {
            learning_rate: self.cfg.training.learning_rate,
            epochs: self.cfg.training.epochs,
            batch_size: self.cfg.training.batch_size,
            seed: derive_u64(self.seed(), node, &format!("train-{round}")),
        };
        let Ok((mut trained, train_loss)) = local_train(&self.global_model, &slice, &train_cfg)
        else {
            return; // divergence: the node abstains this round
        };
        if self.cfg.training.dp_sigma > 0.0 {
            let mut rng = seeded_rng(self.seed(), node, &format!("dp-{round}"));
            trained = add_dp_noise(&trained, self.cfg.training.dp_sigma, &mut rng)
                .expect("validated sigma");
        }
        let claimed = evaluate(&trained, &self.val_set).unwrap_or(0.0);
        let mut update = UpdateRecord::new(
            node,
            trained,
            slice.sample_count() as u64,
            train_loss,
            claimed,
            &self.keys,
        );
        let byzantine = self.nodes[&node].byzantine;
        if let Some(behavior) = byzantine {
            let mut rng = seeded_rng(
                self.cfg.adversary.seed,
                node,
                &format!("adv-{round}"),
            );
            update = apply_adversary(&update, &behavior, &self.keys, &mut rng);
        }
        // The quality proof rides along for every protocol: PoQ elects
        // its leader from proofs and the hierarchical committees use the
        // signed claims as their quality reference.
        let proof = Some(
            submit_proof(node, &update.params, &self.val_set, &self.keys, CHUNK_BYTES)
                .expect("proof over published params"),
        );

        match self.plan.kind {
            TopologyKind::Centralized => {
                let agg = self.plan.aggregator.expect("centralized");
                let payload = Payload::UpdateUp {
                    round,
                    update,
                    proof,
                };
                self.send(sim, MsgKind::UpdateUp, node, agg, &payload);
            }
            TopologyKind::Hierarchical { .. } => {
                let regional = self
                    .plan
                    .cluster_of(node)
                    .map(|c| c.aggregator)
                    .expect("trainer belongs to a cluster");
                let payload = Payload::UpdateUp {
                    round,
                    update,
                    proof,
                };
                self.send(sim, MsgKind::UpdateUp, node, regional, &payload);
            }
            TopologyKind::Decentralized { .. } => {
                // Record own update locally, then push to neighbors.
                self.round.seen.entry(node).or_default().insert(node);
                self.round.pool.insert(node, update.clone());
                if let Some(p) = &proof {
                    self.round.proofs.insert(node, p.clone());
                }
                let neighbors = self.plan.overlay[&node].clone();
                let payload = Payload::Gossip {
                    round,
                    update,
                    proof,
                    forwarded: false,
                };
                for peer in neighbors {
                    self.send(sim, MsgKind::GossipPush, node, peer, &payload);
                }
            }
        }
    }

    fn on_window_close(&mut self, sim: &mut Sim, round: u64) {
        if round != self.round.round || self.done {
            return;
        }
        self.round.window_open = false;
        match self.plan.kind {
            TopologyKind::Centralized => {
                let agg = self.plan.aggregator.expect("centralized");
                if !self.alive(agg) {
                    return; // star center down: the round stalls
                }
                match self.consensus {
                    ConsensusKind::Poq if !self.poq_cfg.verification_enabled => {
                        // Ablation: plain FedAvg, no verification pass.
                        self.commit_plain_fedavg(sim);
                    }
                    ConsensusKind::Pofl => {
                        // Miners race while the basis fans out.
                        self.broadcast_package(sim, round, agg);
                        self.start_mining(sim, round);
                    }
                    _ => self.broadcast_package(sim, round, agg),
                }
            }
            TopologyKind::Hierarchical { .. } => {
                // Regional aggregators pre-aggregate what arrived and
                // ship the exact sums up.
                let root = self.plan.root.expect("hierarchical");
                for cluster in self.plan.clusters.clone() {
                    if !self.alive(cluster.aggregator) {
                        continue; // this region is dark this round
                    }
                    let mut agg = Aggregator::new();
                    let mut participants = Vec::new();
                    let mut proofs = Vec::new();
                    for member in &cluster.members {
                        if let Some(update) = self.round.pool.get(member) {
                            if !update.verify_signature(&self.keys) {
                                continue;
                            }
                            if agg
                                .absorb(&update.params, update.sample_count, update.node)
                                .is_ok()
                            {
                                participants.push(*member);
                            }
                            if let Some(p) = self.round.proofs.get(member) {
                                proofs.push(p.clone());
                            }
                        }
                    }
                    if participants.is_empty() {
                        continue;
                    }
                    let payload = Payload::RegionalUp {
                        round,
                        region: WireAggregate {
                            aggregator: agg,
                            participants,
                        },
                        proofs,
                    };
                    self.send(sim, MsgKind::RegionalUp, cluster.aggregator, root, &payload);
                }
            }
            TopologyKind::Decentralized { .. } => match self.consensus {
                ConsensusKind::Pofl => self.start_mining(sim, round),
                ConsensusKind::Flpbft => self.start_pbft_everywhere(sim, round),
                ConsensusKind::Poq => unreachable!("validated binding"),
            },
        }
    }

    fn broadcast_package(&mut self, sim: &mut Sim, round: u64, agg: NodeId) {
        let updates: Vec<UpdateRecord> = self.round.pool.values().cloned().collect();
        if updates.is_empty() {
            return;
        }
        let proofs: Vec<QualityProof> = self.round.proofs.values().cloned().collect();
        let payload = Payload::Package {
            round,
            updates,
            proofs,
        };
        for validator in self.round.committee.clone() {
            self.send(sim, MsgKind::Package, agg, validator, &payload);
        }
    }

    /// Verification results are identical for every honest validator, so
    /// the world memoizes one pass and each validator consults it.
    fn verified_updates(&mut self) -> Rc<Vec<VerifiedUpdate>> {
        if self.round.verified.is_none() {
            let updates: Vec<UpdateRecord> = self.round.pool.values().cloned().collect();
            let verified = verify_round_updates(
                &updates,
                &self.val_set,
                &self.keys,
                self.poq_cfg.claim_tolerance,
            );
            self.round.verified = Some(Rc::new(verified));
        }
        Rc::clone(self.round.verified.as_ref().unwrap())
    }

    fn leader_eligible_proofs(&self) -> Vec<QualityProof> {
        self.round
            .proofs
            .values()
            .filter(|p| !self.reputation.is_barred(p.node))
            .cloned()
            .collect()
    }

    // ------------------------------------------------------------------
    // PoQ
    // ------------------------------------------------------------------

    fn on_package_poq(&mut self, sim: &mut Sim, round: u64, validator: NodeId) {
        let verified = self.verified_updates();
        if std::env::var_os("BCFL_DEBUG_POQ").is_some() && self.round.proposal.is_none() {
            let best = crate::consensus::best_verified_accuracy(&verified);
            for v in verified.iter() {
                eprintln!(
                    "r{round} node {} claimed {:.3} verified {:.3} claim_ok {} floor {:.3}",
                    v.update.node, v.update.claimed_accuracy, v.verified_accuracy, v.claim_ok,
                    best - self.poq_cfg.exclusion_margin
                );
            }
        }
        let proofs = self.leader_eligible_proofs();
        let Ok(leader) = select_leader(&proofs, &self.keys) else {
            return;
        };
        if validator != leader || self.round.proposal.is_some() {
            return;
        }
        let Ok((proposal, model)) = build_proposal(round, leader, &verified, &self.poq_cfg)
        else {
            return;
        };
        self.round.proposal = Some(proposal.clone());
        self.round.proposal_model = Some(model);
        // Leader's own vote, then the proposal goes out to the rest.
        let own = validator_vote(&proposal, &verified, &self.val_set, &self.poq_cfg);
        self.round.votes.insert(leader, own);
        let payload = Payload::Proposal { round, proposal };
        for v in self.round.committee.clone() {
            if v != leader {
                self.send(sim, MsgKind::Proposal, leader, v, &payload);
            }
        }
        self.maybe_commit_poq(sim);
    }

    fn on_proposal(&mut self, sim: &mut Sim, round: u64, validator: NodeId, proposal: AggregationProposal) {
        if round != self.round.round || !self.round.committee.contains(&validator) {
            return;
        }
        let verified = self.verified_updates();
        let accept = validator_vote(&proposal, &verified, &self.val_set, &self.poq_cfg);
        if self.round.proposal.is_none() {
            // Validators that were not the leader still need the proposal
            // recorded for the commit step.
            self.round.proposal = Some(proposal.clone());
            if accept {
                self.round.proposal_model = build_proposal(
                    round,
                    proposal.leader,
                    &verified,
                    &self.poq_cfg,
                )
                .ok()
                .map(|(_, m)| m);
            }
        }
        let payload = Payload::Vote {
            round,
            voter: validator,
            accept,
        };
        self.send(sim, MsgKind::Vote, validator, proposal.leader, &payload);
    }

    fn on_vote(&mut self, sim: &mut Sim, round: u64, voter: NodeId, accept: bool) {
        if round != self.round.round || self.round.committed {
            return;
        }
        if !self.round.committee.contains(&voter) {
            return;
        }
        self.round.votes.insert(voter, accept);
        self.maybe_commit_poq(sim);
    }

    fn maybe_commit_poq(&mut self, sim: &mut Sim) {
        if self.round.committed {
            return;
        }
        let n = self.round.committee.len();
        if !tally_votes(&self.round.votes, n) {
            return;
        }
        let Some(proposal) = self.round.proposal.clone() else {
            return;
        };
        let Some(model) = self.round.proposal_model.clone() else {
            return;
        };
        let leader = proposal.leader;
        let included: BTreeSet<NodeId> = proposal.included.iter().copied().collect();
        let excluded: Vec<NodeId> = self
            .round
            .pool
            .keys()
            .copied()
            .filter(|n| !included.contains(n))
            .collect();
        let mut summary = vec![("leader".to_string(), leader as f64)];
        summary.push(("votes".to_string(), self.round.votes.values().filter(|v| **v).count() as f64));
        self.apply_commit(sim, model, proposal.model_root, proposal.included.clone(), excluded, summary);
        // Commit notices fan out to the committee and the star center.
        let payload = Payload::Outcome {
            round: self.round.round,
            committed: true,
            model_root: Some(proposal.model_root),
        };
        let mut recipients = self.round.committee.clone();
        if let Some(agg) = self.plan.aggregator {
            recipients.push(agg);
        }
        for r in recipients {
            if r != leader {
                self.send(sim, MsgKind::Outcome, leader, r, &payload);
            }
        }
    }

    fn commit_plain_fedavg(&mut self, sim: &mut Sim) {
        let updates: Vec<UpdateRecord> = self
            .round
            .pool
            .values()
            .filter(|u| u.verify_signature(&self.keys))
            .cloned()
            .collect();
        if updates.is_empty() {
            return;
        }
        let Ok(model) = fedavg(updates.iter()) else {
            return;
        };
        let Ok(root) = model_root_of(&model) else {
            return;
        };
        let participants = updates.iter().map(|u| u.node).collect();
        self.apply_commit(sim, model, root, participants, Vec::new(), vec![
            ("verification".to_string(), 0.0),
        ]);
    }

    // ------------------------------------------------------------------
    // Hierarchical root consensus
    // ------------------------------------------------------------------

    fn on_regional_up(&mut self, round: u64, regional: NodeId, region: WireAggregate, proofs: Vec<QualityProof>) {
        if round != self.round.round {
            return;
        }
        self.round.regions.insert(regional, region);
        for p in proofs {
            self.round.proofs.insert(p.node, p);
        }
    }

    fn on_consensus_start(&mut self, sim: &mut Sim, round: u64) {
        if round != self.round.round || self.done {
            return;
        }
        let root = self.plan.root.expect("hierarchical only");
        if !self.alive(root) || self.round.regions.is_empty() {
            return;
        }
        // Participants are every trainer folded into a region.
        let participants: Vec<NodeId> = self
            .round
            .regions
            .values()
            .flat_map(|r| r.participants.iter().copied())
            .collect();
        let mut merged = Aggregator::new();
        for region in self.round.regions.values() {
            if merged.merge(&region.aggregator).is_err() {
                return;
            }
        }
        let Ok(model) = merged.finalize() else {
            return;
        };
        let Ok(model_hash) = model_root_of(&model) else {
            return;
        };
        self.round.participants = participants.clone();

        match self.consensus {
            ConsensusKind::Poq => {
                let proposal = AggregationProposal {
                    round,
                    leader: root,
                    included: participants,
                    model_root: model_hash,
                };
                self.round.proposal = Some(proposal.clone());
                self.round.proposal_model = Some(model);
                self.round.votes.insert(root, true);
                let regions: Vec<WireAggregate> = self.round.regions.values().cloned().collect();
                let proofs: Vec<QualityProof> = self.round.proofs.values().cloned().collect();
                let payload = Payload::RegionPackage {
                    round,
                    regions,
                    proofs,
                };
                for agg in self.round.committee.clone() {
                    if agg != root {
                        self.send(sim, MsgKind::RegionPackage, root, agg, &payload);
                    }
                }
                self.maybe_commit_hierarchical(sim);
            }
            ConsensusKind::Flpbft => {
                let regions: Vec<WireAggregate> = self.round.regions.values().cloned().collect();
                let proofs: Vec<QualityProof> = self.round.proofs.values().cloned().collect();
                let payload = Payload::RegionPackage {
                    round,
                    regions,
                    proofs,
                };
                for agg in self.round.committee.clone() {
                    if agg != root {
                        self.send(sim, MsgKind::RegionPackage, root, agg, &payload);
                    }
                }
                self.round.pbft_model = Some(model);
                self.round.pbft_root = Some(model_hash);
                self.start_pbft_member(sim, round, root);
            }
            ConsensusKind::Pofl => unreachable!("validated binding"),
        }
    }

    fn on_region_package(&mut self, sim: &mut Sim, round: u64, member: NodeId, regions: Vec<WireAggregate>, proofs: Vec<QualityProof>) {
        if round != self.round.round || !self.alive(member) {
            return;
        }
        let root = self.plan.root.expect("hierarchical only");
        // Independent recomputation of the merge.
        let mut merged = Aggregator::new();
        for region in &regions {
            if merged.merge(&region.aggregator).is_err() {
                return;
            }
        }
        let Ok(model) = merged.finalize() else {
            return;
        };
        let Ok(recomputed) = model_root_of(&model) else {
            return;
        };
        match self.consensus {
            ConsensusKind::Poq => {
                let Some(proposal) = self.round.proposal.clone() else {
                    return;
                };
                let best_claim = proofs
                    .iter()
                    .filter(|p| p.verify(&self.keys))
                    .map(|p| p.accuracy)
                    .fold(0.0f64, f64::max);
                let quality = evaluate(&model, &self.val_set).unwrap_or(0.0);
                let accept = recomputed == proposal.model_root
                    && quality >= best_claim - self.poq_cfg.accuracy_tolerance;
                let payload = Payload::Vote {
                    round,
                    voter: member,
                    accept,
                };
                self.send(sim, MsgKind::Vote, member, root, &payload);
            }
            ConsensusKind::Flpbft => {
                let _ = recomputed;
                self.start_pbft_member(sim, round, member);
            }
            ConsensusKind::Pofl => {}
        }
    }

    fn maybe_commit_hierarchical(&mut self, sim: &mut Sim) {
        if self.round.committed {
            return;
        }
        let n = self.round.committee.len();
        if !tally_votes(&self.round.votes, n) {
            return;
        }
        let Some(proposal) = self.round.proposal.clone() else {
            return;
        };
        let Some(model) = self.round.proposal_model.clone() else {
            return;
        };
        let root = self.plan.root.expect("hierarchical");
        self.apply_commit(
            sim,
            model,
            proposal.model_root,
            proposal.included.clone(),
            Vec::new(),
            vec![("regions".to_string(), self.round.regions.len() as f64)],
        );
        let payload = Payload::Outcome {
            round: self.round.round,
            committed: true,
            model_root: Some(proposal.model_root),
        };
        for agg in self.round.committee.clone() {
            if agg != root {
                self.send(sim, MsgKind::Outcome, root, agg, &payload);
            }
        }
    }

    // ------------------------------------------------------------------
    // PoFL
    // ------------------------------------------------------------------

    /// Every eligible miner searches for a nonce over its own published
    /// update; attempts cost simulated time, so the announcement fires
    /// only once the work is paid for.
    fn start_mining(&mut self, sim: &mut Sim, round: u64) {
        let deadline = self.round.window_close_ms + self.cfg.consensus.mining_window_ms;
        for miner in self.active_trainers(round) {
            if self.reputation.is_barred(miner) {
                continue;
            }
            let Some(update) = self.round.pool.get(&miner).cloned() else {
                continue;
            };
            let Ok(root) = model_root_of(&update.params) else {
                continue;
            };
            let loss = match evaluate_loss(&update.params, &self.val_set) {
                Ok(l) => l,
                Err(_) => continue,
            };
            let mut block = MiningBlock {
                prev_hash: self.chain.tip_hash(),
                model_root: root,
                train_loss: loss,
                miner,
                nonce: 0,
                noised_params_ref: root,
            };
            let mut rng = seeded_rng(self.seed(), miner, &format!("mine-{round}"));
            let result = mine(
                &block,
                &self.difficulty,
                self.cfg.consensus.max_attempts,
                &mut rng,
            );
            let MineResult::Found { nonce, attempts } = result else {
                continue; // exhausted: this miner abstains
            };
            block.nonce = nonce;
            let cost_ms = (attempts * self.cfg.consensus.attempt_cost_us).div_ceil(1000);
            let found_at = self.round.window_close_ms + cost_ms;
            if found_at > deadline {
                continue; // solved too late to announce this round
            }
            self.round.solved.insert(miner, block);
            sim.schedule_at(found_at, Ev::AnnounceBlock { round, miner });
        }
    }

    fn on_announce_block(&mut self, sim: &mut Sim, round: u64, miner: NodeId) {
        if round != self.round.round || self.done || !self.alive(miner) {
            return;
        }
        let Some(block) = self.round.solved.get(&miner).cloned() else {
            return;
        };
        self.round.mined.insert(miner, block.clone());
        let payload = Payload::MiningAnnounce { round, block };
        for peer in self.round.committee.clone() {
            if peer != miner {
                self.send(sim, MsgKind::MiningAnnounce, miner, peer, &payload);
            }
        }
    }

    fn on_mining_deadline(&mut self, sim: &mut Sim, round: u64) {
        if round != self.round.round || self.round.committed || self.done {
            return;
        }
        let mut valid: Vec<MiningBlock> = Vec::new();
        let mut excluded: Vec<NodeId> = Vec::new();
        for block in self.round.mined.values() {
            let ok = verify_block(
                block,
                self.round.pool.get(&block.miner),
                &self.difficulty,
                &self.val_set,
                self.cfg.consensus.loss_tolerance,
                CHUNK_BYTES,
            );
            if ok {
                valid.push(block.clone());
            } else {
                excluded.push(block.miner);
            }
        }
        let Some(winner) = select_winner(valid.iter(), &self.difficulty).cloned() else {
            return; // no valid block this round
        };
        let basis: Vec<UpdateRecord> = self
            .round
            .pool
            .values()
            .filter(|u| u.verify_signature(&self.keys))
            .cloned()
            .collect();
        if basis.is_empty() {
            return;
        }
        let Ok(model) = fedavg(basis.iter()) else {
            return;
        };
        let Ok(root) = model_root_of(&model) else {
            return;
        };
        let rewards = distribute_rewards(
            &basis,
            winner.miner,
            self.cfg.consensus.round_reward,
            &self.val_set,
        )
        .unwrap_or_default();
        self.round.rewards = rewards.clone();
        for (node, amount) in &rewards {
            *self.rewards_total.entry(*node).or_insert(0) += amount;
        }
        let participants: Vec<NodeId> = basis.iter().map(|u| u.node).collect();
        self.apply_commit(
            sim,
            model,
            root,
            participants,
            excluded,
            vec![
                ("winner".to_string(), winner.miner as f64),
                ("winner_loss".to_string(), winner.train_loss),
            ],
        );
        let payload = Payload::Outcome {
            round,
            committed: true,
            model_root: Some(root),
        };
        let mut recipients = self.round.committee.clone();
        if let Some(agg) = self.plan.aggregator {
            recipients.push(agg);
        }
        for r in recipients {
            if r != winner.miner {
                self.send(sim, MsgKind::Outcome, winner.miner, r, &payload);
            }
        }
    }

    // ------------------------------------------------------------------
    // FL-PBFT
    // ------------------------------------------------------------------

    fn pbft_committee(&self) -> Option<CommitteeConfig> {
        let members = self.round.committee.clone();
        if members.is_empty() {
            return None;
        }
        let f = CommitteeConfig::max_f(members.len());
        CommitteeConfig::new(members, f).ok()
    }

    fn build_pbft_context(&mut self, round: u64) -> Option<(RoundContext, ModelParams)> {
        if let (Some(model), Some(root)) = (self.round.pbft_model.clone(), self.round.pbft_root) {
            // Hierarchical path: context over the merged regions.
            let best_claim = self
                .round
                .proofs
                .values()
                .filter(|p| p.verify(&self.keys))
                .map(|p| p.accuracy)
                .fold(0.0f64, f64::max);
            let accuracy = evaluate(&model, &self.val_set).unwrap_or(0.0);
            return Some((
                RoundContext {
                    sequence: round,
                    expected_root: root,
                    aggregate_accuracy: accuracy,
                    quality_floor: best_claim - self.cfg.consensus.quality_floor_margin,
                    discounted: BTreeSet::new(),
                },
                model,
            ));
        }

        let updates: Vec<UpdateRecord> = self
            .round
            .pool
            .values()
            .filter(|u| u.verify_signature(&self.keys))
            .cloned()
            .collect();
        if updates.is_empty() {
            return None;
        }
        let suspects = detect_byzantine(
            &updates,
            &self.global_model,
            self.cfg.consensus.magnitude_factor,
            self.cfg.consensus.cosine_floor,
        );
        self.round.suspects = suspects.clone();
        let filtered: Vec<&UpdateRecord> = updates
            .iter()
            .filter(|u| !suspects.contains(&u.node))
            .collect();
        if filtered.is_empty() {
            return None;
        }
        let model = fedavg(filtered.iter().copied()).ok()?;
        let root = model_root_of(&model).ok()?;
        let verified = self.verified_updates();
        let best = crate::consensus::best_verified_accuracy(&verified);
        let accuracy = evaluate(&model, &self.val_set).unwrap_or(0.0);
        self.round.pbft_model = Some(model.clone());
        self.round.pbft_root = Some(root);
        Some((
            RoundContext {
                sequence: round,
                expected_root: root,
                aggregate_accuracy: accuracy,
                quality_floor: best - self.cfg.consensus.quality_floor_margin,
                discounted: suspects,
            },
            model,
        ))
    }

    fn start_pbft_everywhere(&mut self, sim: &mut Sim, round: u64) {
        for member in self.round.committee.clone() {
            if self.alive(member) {
                self.start_pbft_member(sim, round, member);
            }
        }
    }

    fn start_pbft_member(&mut self, sim: &mut Sim, round: u64, member: NodeId) {
        if self.round.replicas.contains_key(&member) || !self.alive(member) {
            return;
        }
        let Some(cfg) = self.pbft_committee() else {
            return;
        };
        let Some((ctx, _model)) = self.build_pbft_context(round) else {
            return;
        };
        let mut replica = Replica::new(member, cfg);
        // Rotate the starting leader with the round number.
        let base_view = (round - 1) % replica.cfg.nodes.len() as u64;
        for _ in 0..base_view {
            replica.on_timeout(replica.view(), &self.keys);
        }
        self.round.pbft_base_view = base_view;
        let view = replica.view();
        let actions = replica.begin_round(ctx, &self.keys);
        self.round.replicas.insert(member, replica);
        self.dispatch_pbft_actions(sim, round, member, actions);
        let timeout = self.cfg.consensus.pbft_timeout_ms;
        sim.schedule(
            Ev::PbftTimeout {
                round,
                node: member,
                view,
            },
            timeout,
        );
    }

    fn dispatch_pbft_actions(
        &mut self,
        sim: &mut Sim,
        round: u64,
        member: NodeId,
        actions: Vec<ReplicaAction>,
    ) {
        for action in actions {
            match action {
                ReplicaAction::Broadcast(msg) => {
                    let kind = match msg.kind {
                        crate::consensus::flpbft::PbftKind::PrePrepare => MsgKind::PbftPrePrepare,
                        crate::consensus::flpbft::PbftKind::Prepare => MsgKind::PbftPrepare,
                        crate::consensus::flpbft::PbftKind::Commit => MsgKind::PbftCommit,
                    };
                    // Loop the sender's own message back locally.
                    let recipients: Vec<NodeId> = self
                        .round
                        .committee
                        .iter()
                        .copied()
                        .filter(|&p| p != member)
                        .collect();
                    let payload = Payload::Pbft {
                        round,
                        msg: msg.clone(),
                    };
                    for peer in recipients {
                        self.send(sim, kind, member, peer, &payload);
                    }
                    let own_actions = self
                        .round
                        .replicas
                        .get_mut(&member)
                        .map(|r| r.on_message(member, &msg, &self.keys))
                        .unwrap_or_default();
                    self.dispatch_pbft_actions(sim, round, member, own_actions);
                }
                ReplicaAction::Finalize { sequence, root } => {
                    self.on_pbft_finalize(sim, sequence, root);
                }
            }
        }
    }

    fn on_pbft_message(&mut self, sim: &mut Sim, round: u64, from: NodeId, to: NodeId, msg: PbftMessage) {
        if round != self.round.round || !self.alive(to) {
            return;
        }
        let actions = match self.round.replicas.get_mut(&to) {
            Some(replica) => replica.on_message(from, &msg, &self.keys),
            None => return,
        };
        self.dispatch_pbft_actions(sim, round, to, actions);
    }

    fn on_pbft_timeout(&mut self, sim: &mut Sim, round: u64, node: NodeId, view: u64) {
        if round != self.round.round || self.round.committed || !self.alive(node) || self.done {
            return;
        }
        let (actions, new_view, changed) = match self.round.replicas.get_mut(&node) {
            Some(replica) => {
                if replica.finalized.is_some() || replica.view() != view {
                    return;
                }
                let actions = replica.on_timeout(view, &self.keys);
                (actions, replica.view(), true)
            }
            None => return,
        };
        if changed {
            self.round.pbft_max_view = self.round.pbft_max_view.max(new_view);
            self.dispatch_pbft_actions(sim, round, node, actions);
            if sim.now() + self.cfg.consensus.pbft_timeout_ms < self.round.end_ms {
                sim.schedule(
                    Ev::PbftTimeout {
                        round,
                        node,
                        view: new_view,
                    },
                    self.cfg.consensus.pbft_timeout_ms,
                );
            }
        }
    }

    fn on_pbft_finalize(&mut self, sim: &mut Sim, sequence: u64, root: Hash32) {
        if sequence != self.round.round {
            return;
        }
        if self.round.committed {
            // Agreement cross-check: every later finalize must match.
            assert_eq!(
                self.round.committed_root,
                Some(root),
                "honest replicas finalized different roots"
            );
            return;
        }
        let Some(model) = self.round.pbft_model.clone() else {
            return;
        };
        let expected = self.round.pbft_root.expect("model implies root");
        assert_eq!(expected, root, "finalized root differs from aggregate");
        let participants: Vec<NodeId> = if self.round.participants.is_empty() {
            self.round
                .pool
                .keys()
                .copied()
                .filter(|n| !self.round.suspects.contains(n))
                .collect()
        } else {
            self.round.participants.clone()
        };
        let flagged: Vec<NodeId> = self.round.suspects.iter().copied().collect();
        // Views beyond the round's rotated starting view, i.e. how many
        // leader changes liveness needed.
        let max_view = self
            .round
            .replicas
            .values()
            .map(|r| r.view())
            .max()
            .unwrap_or(0);
        let view_changes = max_view.saturating_sub(self.round.pbft_base_view);
        self.apply_commit(
            sim,
            model,
            root,
            participants,
            flagged,
            vec![("pbft_view".to_string(), view_changes as f64)],
        );
    }

    // ------------------------------------------------------------------
    // Commit and bookkeeping
    // ------------------------------------------------------------------

    fn apply_commit(
        &mut self,
        sim: &mut Sim,
        model: ModelParams,
        root: Hash32,
        participants: Vec<NodeId>,
        excluded: Vec<NodeId>,
        mut summary: Vec<(String, f64)>,
    ) {
        if self.round.committed {
            return;
        }
        let score = evaluate(&model, &self.val_set).unwrap_or(0.0);
        summary.push(("validation_score".to_string(), score));

        // Off-chain first: the content address must equal the Merkle root
        // the chain anchors.
        let address = self
            .dht
            .put(model.to_canonical_bytes())
            .expect("dht accepts model bytes");
        assert_eq!(address, root, "content address must equal the model root");

        let record = OnChainRecord {
            round: self.round.round,
            model_root: root,
            participants: participants.clone(),
            summary,
            timestamp_ms: sim.now(),
        };
        self.chain
            .append_block(record)
            .expect("round records fit the cap");
        self.audit
            .append(RoundAuditRecord {
                round: self.round.round,
                participants: participants
                    .iter()
                    .map(|&n| (n, self.keys.fingerprint(n)))
                    .collect(),
                model_root: root,
                validation_score: score,
                timestamp_ms: sim.now(),
            })
            .expect("rounds strictly increase");

        // Cache: the superseded global model gives way to the new one.
        let old_root = self.global_root;
        self.cache.invalidate(&old_root);
        self.cache.put(root, model.clone());

        // Reputation: honest participation, detector flags, exclusions.
        let excluded: BTreeSet<NodeId> = excluded.into_iter().collect();
        let flagged: BTreeSet<NodeId> = self.round.suspects.clone();
        let pool_nodes: Vec<NodeId> = self.round.pool.keys().copied().collect();
        for node in pool_nodes {
            let outcome = if flagged.contains(&node) {
                RoundOutcome::FlaggedByDetector
            } else if excluded.contains(&node) {
                RoundOutcome::ExcludedByVote
            } else {
                RoundOutcome::HonestContribution
            };
            self.reputation.record(node, outcome);
        }

        self.global_model = model;
        self.global_root = root;
        self.round.committed = true;
        self.round.committed_root = Some(root);
        self.round.committed_score = Some(score);
        self.round.committed_at_ms = Some(sim.now());
        self.round.participants = participants;
    }

    fn on_round_end(&mut self, sim: &mut Sim, round: u64) {
        if round != self.round.round || self.done {
            return;
        }
        let mut local_accuracy = BTreeMap::new();
        for node in self.nodes.values() {
            if node.admitted && node.join_round <= round {
                if let Ok(acc) = evaluate(&self.global_model, &node.local_test) {
                    local_accuracy.insert(node.id, acc);
                }
            }
        }
        let messages: BTreeMap<String, u64> = self
            .msg_counter
            .iter()
            .map(|(k, v)| {
                let before = self.round.msgs_at_start.get(k).copied().unwrap_or(0);
                (k.clone(), v - before)
            })
            .filter(|(_, v)| *v > 0)
            .collect();
        let participants = if self.round.committed {
            self.round.participants.clone()
        } else {
            self.round.pool.keys().copied().collect()
        };
        let reputation: BTreeMap<NodeId, f64> = self
            .nodes
            .values()
            .filter(|n| n.admitted)
            .map(|n| (n.id, self.reputation.score_of(n.id).score))
            .collect();
        self.rows.push(MetricsRow {
            round,
            committed: self.round.committed,
            global_score: self.round.committed_score,
            local_accuracy,
            participants,
            messages,
            bytes_sent: sim.stats.bytes_sent - self.round.bytes_at_start,
            // Time from round start to commit; failed rounds burn the
            // whole window-plus-consensus budget.
            duration_ms: self
                .round
                .committed_at_ms
                .unwrap_or_else(|| sim.now())
                - self.round.start_ms,
            model_root: self.round.committed_root.map(|r| r.to_hex()),
            suspects: self.round.suspects.iter().copied().collect(),
            rewards: self.round.rewards.clone(),
            reputation,
        });

        if round >= self.cfg.experiment.rounds {
            self.done = true;
            return;
        }
        let pause = if self.cfg.schedule.inter_round_pause {
            let mut rng = seeded_rng(self.seed(), u64::MAX, &format!("pause-{round}"));
            rng.gen_range(120_000..=240_000)
        } else {
            0
        };
        sim.schedule(Ev::RoundStart(round + 1), pause);
    }

    // ------------------------------------------------------------------
    // Delivery dispatch
    // ------------------------------------------------------------------

    fn on_deliver(&mut self, sim: &mut Sim, message: Message) {
        if self.done || !self.alive(message.dst) {
            return;
        }
        let Ok(payload) = Payload::decode(&message.payload) else {
            return;
        };
        let round = payload.round();
        match payload {
            Payload::ModelDown { .. } => {
                if round != self.round.round {
                    return;
                }
                // Regional aggregators fan the model out to their cluster.
                if let Some(cluster) = self
                    .plan
                    .clusters
                    .iter()
                    .find(|c| c.aggregator == message.dst)
                    .cloned()
                {
                    let model = self.global_model.clone();
                    for member in cluster.members {
                        if self.nodes[&member].admitted
                            && self.nodes[&member].join_round <= round
                        {
                            let payload = Payload::ModelDown {
                                round,
                                model: model.clone(),
                            };
                            self.send(sim, MsgKind::ModelDown, message.dst, member, &payload);
                        }
                    }
                } else {
                    let delay =
                        self.cfg.training.train_duration_ms + self.extra_delay(message.dst);
                    sim.schedule(
                        Ev::TrainDone {
                            round,
                            node: message.dst,
                        },
                        delay,
                    );
                }
            }
            Payload::UpdateUp { update, proof, .. } => {
                self.accept_update(message.dst, round, update, proof);
            }
            Payload::Gossip {
                update,
                proof,
                ..
            } => {
                self.on_gossip(sim, round, message.src, message.dst, update, proof);
            }
            Payload::RegionalUp { region, proofs, .. } => {
                if message.dst == self.plan.root.unwrap_or(u64::MAX) {
                    self.on_regional_up(round, message.src, region, proofs);
                }
            }
            Payload::Package { updates, proofs, .. } => {
                if round != self.round.round {
                    return;
                }
                // The package IS the validator's copy of the round set;
                // adopt it (identical bytes from the collection point).
                if self.round.pool.is_empty() {
                    for u in updates {
                        self.round.pool.insert(u.node, u);
                    }
                    for p in proofs {
                        self.round.proofs.insert(p.node, p);
                    }
                }
                match self.consensus {
                    ConsensusKind::Poq => self.on_package_poq(sim, round, message.dst),
                    ConsensusKind::Flpbft => {
                        self.start_pbft_member(sim, round, message.dst)
                    }
                    ConsensusKind::Pofl => {
                        // Mining is driven from the window close; the
                        // package only shares the aggregation basis.
                    }
                }
            }
            Payload::RegionPackage {
                regions, proofs, ..
            } => {
                self.on_region_package(sim, round, message.dst, regions, proofs);
            }
            Payload::Proposal { proposal, .. } => {
                self.on_proposal(sim, round, message.dst, proposal);
            }
            Payload::Vote { voter, accept, .. } => match self.plan.kind {
                TopologyKind::Hierarchical { .. } => {
                    if round == self.round.round && message.dst == self.plan.root.unwrap_or(u64::MAX) {
                        self.round.votes.insert(voter, accept);
                        self.maybe_commit_hierarchical(sim);
                    }
                }
                _ => self.on_vote(sim, round, voter, accept),
            },
            Payload::Outcome { .. } => {
                // Commit notices inform peers; the world ledger already
                // reflects the commit.
            }
            Payload::MiningAnnounce { block, .. } => {
                if round == self.round.round {
                    self.round.mined.entry(block.miner).or_insert(block);
                }
            }
            Payload::Pbft { msg, .. } => {
                self.on_pbft_message(sim, round, message.src, message.dst, msg);
            }
        }
    }

    fn accept_update(
        &mut self,
        collector: NodeId,
        round: u64,
        update: UpdateRecord,
        proof: Option<QualityProof>,
    ) {
        let expected_collector = match self.plan.kind {
            TopologyKind::Centralized => self.plan.aggregator,
            TopologyKind::Hierarchical { .. } => {
                self.plan.cluster_of(update.node).map(|c| c.aggregator)
            }
            TopologyKind::Decentralized { .. } => Some(collector),
        };
        if expected_collector != Some(collector) || round > self.round.round {
            return;
        }
        if self.round.window_open {
            self.round.pool.insert(update.node, update.clone());
            if let Some(p) = proof {
                self.round.proofs.insert(update.node, p);
            }
        } else {
            // Arrived during the consensus phase: rolls to the next round.
            self.late_buffer.insert(update.node, (update, proof));
        }
    }

    fn on_gossip(
        &mut self,
        sim: &mut Sim,
        round: u64,
        from: NodeId,
        to: NodeId,
        update: UpdateRecord,
        proof: Option<QualityProof>,
    ) {
        if round != self.round.round || !self.round.window_open {
            return;
        }
        let origin = update.node;
        let seen = self.round.seen.entry(to).or_default();
        if !seen.insert(origin) {
            return; // already known: no re-forward
        }
        self.round.pool.entry(origin).or_insert_with(|| update.clone());
        if let Some(p) = &proof {
            self.round.proofs.entry(origin).or_insert_with(|| p.clone());
        }
        let neighbors: Vec<NodeId> = self.plan.overlay[&to]
            .iter()
            .copied()
            .filter(|&p| p != from)
            .collect();
        let payload = Payload::Gossip {
            round,
            update,
            proof,
            forwarded: true,
        };
        for peer in neighbors {
            self.send(sim, MsgKind::GossipForward, to, peer, &payload);
        }
    }

    fn handle(&mut self, sim: &mut Sim, ev: Ev) {
        match ev {
            Ev::RoundStart(r) => self.on_round_start(sim, r),
            Ev::TrainDone { round, node } => self.on_train_done(sim, round, node),
            Ev::Deliver(m) => self.on_deliver(sim, m),
            Ev::WindowClose(r) => self.on_window_close(sim, r),
            Ev::ConsensusStart(r) => self.on_consensus_start(sim, r),
            Ev::AnnounceBlock { round, miner } => self.on_announce_block(sim, round, miner),
            Ev::MiningDeadline(r) => self.on_mining_deadline(sim, r),
            Ev::PbftTimeout { round, node, view } => self.on_pbft_timeout(sim, round, node, view),
            Ev::Crash(node) => {
                match self.nodes.get_mut(&node) {
                    Some(n) => n.alive = false,
                    None => {
                        self.dead_infra.insert(node);
                    }
                }
            }
            Ev::RoundEnd(r) => self.on_round_end(sim, r),
        }
    }
}

fn model_root_of(model: &ModelParams) -> Result<Hash32, LedgerError> {
    let chunked = chunk_model(model, CHUNK_BYTES)?;
    merkle_root(&chunked.chunks)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Arc<Dataset>, HarnessError> {
    match cfg.dataset.source.as_str() {
        "idx" => {
            let images = cfg.dataset.idx_images.as_ref().expect("validated");
            let labels = cfg.dataset.idx_labels.as_ref().expect("validated");
            Ok(Arc::new(crate::learning::load_idx_dataset(images, labels)?))
        }
        _ => Ok(Arc::new(crate::learning::synthetic_dataset(&SyntheticSpec {
            classes: cfg.dataset.classes,
            dims: cfg.dataset.dims,
            per_class: cfg.dataset.per_class,
            spread: cfg.dataset.spread,
            seed: cfg.experiment.seed,
        }))),
    }
}

/// Execute a configured experiment to completion.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts, HarnessError> {
    let (mut sim, mut world) = World::new(cfg)?;
    sim.schedule(Ev::RoundStart(1), 0);
    let mut processed = 0;
    while sim.pending_events() > 0 {
        processed += sim.drain(|sim, ev| world.handle(sim, ev));
    }
    Ok(RunArtifacts {
        rows: world.rows,
        chain: world.chain,
        audit: world.audit,
        final_model: world.global_model,
        final_root: world.global_root,
        reputation: world.reputation.snapshot(),
        rewards_total: world.rewards_total,
        events_processed: processed,
    })
}
