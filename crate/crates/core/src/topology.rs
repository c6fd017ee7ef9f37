//! Coordination structures: centralized star, hierarchical clusters, and
//! decentralized k-regular overlays.
//!
//! [`build_topology`] lays out the routing plan; the experiment harness
//! executes rounds over it and owns the per-kind message counters. The
//! centralized aggregator, regional aggregators, and the hierarchy root
//! are dedicated infrastructure nodes with ids allocated above the
//! trainer ids, so killing one is a meaningful single-point-of-failure
//! experiment.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::crypto::{seeded_rng, NodeId};
use crate::learning::{AggError, Aggregator, ModelParams, UpdateRecord};

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("need at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("cluster_size must be >= 2, got {0}")]
    BadClusterSize(usize),
    #[error("overlay_degree must be >= 2 and < n ({n}), got {degree}")]
    BadDegree { degree: usize, n: usize },
    #[error("k-regular overlay needs n * degree even (n={n}, degree={degree})")]
    OddStubCount { n: usize, degree: usize },
    #[error("failed to build a connected overlay after {attempts} attempts")]
    OverlayConstructionFailed { attempts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyKind {
    Centralized,
    Hierarchical { cluster_size: usize },
    Decentralized { overlay_degree: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub aggregator: NodeId,
    pub members: Vec<NodeId>,
}

/// Immutable per-round routing layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingPlan {
    pub kind: TopologyKind,
    pub trainers: Vec<NodeId>,
    /// Centralized: the star center.
    pub aggregator: Option<NodeId>,
    /// Hierarchical: balanced clusters, each with a regional aggregator.
    pub clusters: Vec<Cluster>,
    /// Hierarchical: the global root above the regional aggregators.
    pub root: Option<NodeId>,
    /// Decentralized: adjacency lists of the overlay graph.
    pub overlay: BTreeMap<NodeId, Vec<NodeId>>,
}

impl RoutingPlan {
    /// Infrastructure ids introduced by the plan (empty for decentralized).
    pub fn infra_nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        if let Some(agg) = self.aggregator {
            out.push(agg);
        }
        for c in &self.clusters {
            out.push(c.aggregator);
        }
        if let Some(root) = self.root {
            out.push(root);
        }
        out
    }

    pub fn all_nodes(&self) -> Vec<NodeId> {
        let mut out = self.trainers.clone();
        out.extend(self.infra_nodes());
        out
    }

    /// Where updates converge: the star center, the hierarchy root, or
    /// nowhere (decentralized peers each collect their own view).
    pub fn collection_point(&self) -> Option<NodeId> {
        self.aggregator.or(self.root)
    }

    /// Nodes that verify and vote on the round's aggregate.
    pub fn consensus_committee(&self) -> Vec<NodeId> {
        match self.kind {
            TopologyKind::Centralized | TopologyKind::Decentralized { .. } => {
                self.trainers.clone()
            }
            TopologyKind::Hierarchical { .. } => {
                let mut committee: Vec<NodeId> =
                    self.clusters.iter().map(|c| c.aggregator).collect();
                if let Some(root) = self.root {
                    committee.push(root);
                }
                committee
            }
        }
    }

    pub fn cluster_of(&self, trainer: NodeId) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.members.contains(&trainer))
    }
}

fn connected(adjacency: &BTreeMap<NodeId, Vec<NodeId>>) -> bool {
    let Some((&start, _)) = adjacency.iter().next() else {
        return true;
    };
    let mut seen: BTreeSet<NodeId> = [start].into_iter().collect();
    let mut queue: VecDeque<NodeId> = [start].into_iter().collect();
    while let Some(node) = queue.pop_front() {
        for &next in &adjacency[&node] {
            if seen.insert(next) {
                queue.push_back(next);
            }
        }
    }
    seen.len() == adjacency.len()
}

/// One attempt at a seeded k-regular simple graph via stub matching.
fn try_overlay(
    trainers: &[NodeId],
    degree: usize,
    seed: u64,
) -> Option<BTreeMap<NodeId, Vec<NodeId>>> {
    let mut stubs: Vec<NodeId> = trainers
        .iter()
        .flat_map(|&n| std::iter::repeat_n(n, degree))
        .collect();
    let mut rng = seeded_rng(seed, 0, "overlay");
    stubs.shuffle(&mut rng);
    let mut adjacency: BTreeMap<NodeId, Vec<NodeId>> =
        trainers.iter().map(|&n| (n, Vec::new())).collect();
    let mut edges: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
    for pair in stubs.chunks(2) {
        let (a, b) = (pair[0], pair[1]);
        let key = (a.min(b), a.max(b));
        if a == b || edges.contains(&key) {
            return None; // self-loop or multi-edge: resample
        }
        edges.insert(key);
        adjacency.get_mut(&a).unwrap().push(b);
        adjacency.get_mut(&b).unwrap().push(a);
    }
    for neighbors in adjacency.values_mut() {
        neighbors.sort_unstable();
    }
    connected(&adjacency).then_some(adjacency)
}

const OVERLAY_ATTEMPTS: usize = 10;
const MATCHINGS_PER_ATTEMPT: u64 = 40;

/// Build the routing layout for one coordination structure.
pub fn build_topology(
    kind: TopologyKind,
    trainers: &[NodeId],
    seed: u64,
) -> Result<RoutingPlan, TopologyError> {
    if trainers.len() < 2 {
        return Err(TopologyError::TooFewNodes(trainers.len()));
    }
    let next_id = trainers.iter().max().unwrap() + 1;
    let mut plan = RoutingPlan {
        kind,
        trainers: trainers.to_vec(),
        aggregator: None,
        clusters: Vec::new(),
        root: None,
        overlay: BTreeMap::new(),
    };
    match kind {
        TopologyKind::Centralized => {
            plan.aggregator = Some(next_id);
        }
        TopologyKind::Hierarchical { cluster_size } => {
            if cluster_size < 2 {
                return Err(TopologyError::BadClusterSize(cluster_size));
            }
            let mut infra = next_id;
            for members in trainers.chunks(cluster_size) {
                plan.clusters.push(Cluster {
                    aggregator: infra,
                    members: members.to_vec(),
                });
                infra += 1;
            }
            plan.root = Some(infra);
        }
        TopologyKind::Decentralized { overlay_degree } => {
            if overlay_degree < 2 || overlay_degree >= trainers.len() {
                return Err(TopologyError::BadDegree {
                    degree: overlay_degree,
                    n: trainers.len(),
                });
            }
            if trainers.len() * overlay_degree % 2 != 0 {
                return Err(TopologyError::OddStubCount {
                    n: trainers.len(),
                    degree: overlay_degree,
                });
            }
            let mut found = None;
            'attempts: for attempt in 0..OVERLAY_ATTEMPTS {
                let base = seed
                    .wrapping_add(attempt as u64)
                    .wrapping_mul(MATCHINGS_PER_ATTEMPT);
                for matching in 0..MATCHINGS_PER_ATTEMPT {
                    if let Some(adj) = try_overlay(trainers, overlay_degree, base + matching) {
                        found = Some(adj);
                        break 'attempts;
                    }
                }
            }
            plan.overlay = found.ok_or(TopologyError::OverlayConstructionFailed {
                attempts: OVERLAY_ATTEMPTS,
            })?;
        }
    }
    Ok(plan)
}

/// Regional pre-aggregation that keeps the exact weighted-sum state, so
/// merging regions at the root equals one flat pass bit for bit.
#[derive(Debug, Clone)]
pub struct RegionalAggregate {
    aggregator: Aggregator,
    pub participants: Vec<NodeId>,
}

impl RegionalAggregate {
    pub fn sample_count(&self) -> u64 {
        self.aggregator.total_count()
    }

    pub fn params(&self) -> Result<ModelParams, AggError> {
        self.aggregator.finalize()
    }

    pub fn exact_sums(&self) -> &Aggregator {
        &self.aggregator
    }
}

/// Aggregate one cluster's updates. The result carries the summed sample
/// count so nested averaging weights regions exactly like flat averaging.
pub fn hierarchical_aggregate(
    cluster_updates: &[UpdateRecord],
) -> Result<RegionalAggregate, AggError> {
    if cluster_updates.is_empty() {
        return Err(AggError::Empty);
    }
    let mut aggregator = Aggregator::new();
    for u in cluster_updates {
        aggregator.absorb(&u.params, u.sample_count, u.node)?;
    }
    Ok(RegionalAggregate {
        aggregator,
        participants: cluster_updates.iter().map(|u| u.node).collect(),
    })
}

/// Merge regional aggregates into the global model (the root's job).
pub fn merge_regions(regions: &[RegionalAggregate]) -> Result<ModelParams, AggError> {
    let mut root = Aggregator::new();
    for region in regions {
        root.merge(region.exact_sums())?;
    }
    root.finalize()
}
