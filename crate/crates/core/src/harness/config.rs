//! Experiment configuration: TOML schema, defaults, and validation.
//!
//! Validation reports every failure with its field path so a bad config
//! surfaces all problems in one pass.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::topology::TopologyKind;
use crate::trust::{AdmissionPolicy, AdversaryBehavior, AdversarySpec};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid config ({} problems):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  {}: {}", e.field, e.reason)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub nodes: u64,
    pub rounds: u64,
    /// Updates arriving after this window roll into the next round.
    #[serde(default = "ExperimentSection::default_window")]
    pub collection_window_ms: u64,
    /// Simulated-time budget for the consensus phase after the window.
    #[serde(default = "ExperimentSection::default_consensus_window")]
    pub consensus_window_ms: u64,
    pub seed: u64,
}

impl ExperimentSection {
    fn default_window() -> u64 {
        180_000
    }
    fn default_consensus_window() -> u64 {
        60_000
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    /// "centralized" | "hierarchical" | "decentralized"
    pub kind: String,
    #[serde(default)]
    pub cluster_size: Option<usize>,
    #[serde(default)]
    pub overlay_degree: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConsensusSection {
    /// "poq" | "pofl" | "flpbft"
    pub kind: String,

    // Proof of Quality
    #[serde(default = "ConsensusSection::default_accuracy_tolerance")]
    pub accuracy_tolerance: f64,
    #[serde(default = "ConsensusSection::default_claim_tolerance")]
    pub claim_tolerance: f64,
    #[serde(default = "ConsensusSection::default_exclusion_margin")]
    pub exclusion_margin: f64,
    /// Disable to get plain unverified FedAvg (ablation).
    #[serde(default = "default_true")]
    pub verification_enabled: bool,

    // Proof of Federated Learning
    #[serde(default = "ConsensusSection::default_alpha")]
    pub alpha: f64,
    /// Base target = 2^256 >> target_shift.
    #[serde(default = "ConsensusSection::default_target_shift")]
    pub target_shift: u32,
    #[serde(default = "ConsensusSection::default_max_attempts")]
    pub max_attempts: u64,
    #[serde(default = "ConsensusSection::default_attempt_cost_us")]
    pub attempt_cost_us: u64,
    #[serde(default = "ConsensusSection::default_loss_tolerance")]
    pub loss_tolerance: f64,
    #[serde(default = "ConsensusSection::default_mining_window_ms")]
    pub mining_window_ms: u64,
    #[serde(default = "ConsensusSection::default_round_reward")]
    pub round_reward: u64,

    // FL-PBFT
    #[serde(default = "ConsensusSection::default_pbft_timeout_ms")]
    pub pbft_timeout_ms: u64,
    #[serde(default = "ConsensusSection::default_magnitude_factor")]
    pub magnitude_factor: f64,
    #[serde(default = "ConsensusSection::default_cosine_floor")]
    pub cosine_floor: f64,
    #[serde(default = "ConsensusSection::default_quality_floor_margin")]
    pub quality_floor_margin: f64,
}

impl ConsensusSection {
    fn default_accuracy_tolerance() -> f64 {
        0.05
    }
    fn default_claim_tolerance() -> f64 {
        0.02
    }
    fn default_exclusion_margin() -> f64 {
        0.2
    }
    fn default_alpha() -> f64 {
        2.0
    }
    fn default_target_shift() -> u32 {
        4
    }
    fn default_max_attempts() -> u64 {
        100_000
    }
    fn default_attempt_cost_us() -> u64 {
        50
    }
    fn default_loss_tolerance() -> f64 {
        0.05
    }
    fn default_mining_window_ms() -> u64 {
        30_000
    }
    fn default_round_reward() -> u64 {
        1_000_000
    }
    fn default_pbft_timeout_ms() -> u64 {
        10_000
    }
    fn default_magnitude_factor() -> f64 {
        3.0
    }
    fn default_cosine_floor() -> f64 {
        0.0
    }
    fn default_quality_floor_margin() -> f64 {
        0.1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrustSection {
    /// "permissionless" | "consortium" | "permissioned"
    #[serde(default = "TrustSection::default_model")]
    pub model: String,
    #[serde(default)]
    pub stake_minimum: u64,
    /// Stake presented by every node (permissionless).
    #[serde(default)]
    pub node_stake: u64,
    #[serde(default = "TrustSection::default_approvers")]
    pub approvers_required: usize,
    #[serde(default = "TrustSection::default_roles")]
    pub role_table: Vec<String>,
    /// Role every node's certificate carries (permissioned).
    #[serde(default = "TrustSection::default_node_role")]
    pub node_role: String,
}

impl TrustSection {
    fn default_model() -> String {
        "permissionless".into()
    }
    fn default_approvers() -> usize {
        2
    }
    fn default_roles() -> Vec<String> {
        ["data-provider", "trainer", "aggregator", "validator"]
            .into_iter()
            .map(String::from)
            .collect()
    }
    fn default_node_role() -> String {
        "trainer".into()
    }
}

impl Default for TrustSection {
    fn default() -> Self {
        toml::from_str("").expect("empty trust section has defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdversarySection {
    #[serde(default)]
    pub fraction: f64,
    /// "sign-flip" | "scale" | "gaussian-noise" | "accuracy-spoof"
    #[serde(default = "AdversarySection::default_behavior")]
    pub behavior: String,
    #[serde(default = "AdversarySection::default_factor")]
    pub factor: f64,
    #[serde(default = "AdversarySection::default_sigma")]
    pub sigma: f64,
    #[serde(default = "AdversarySection::default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
}

impl AdversarySection {
    fn default_behavior() -> String {
        "sign-flip".into()
    }
    fn default_factor() -> f64 {
        20.0
    }
    fn default_sigma() -> f64 {
        0.1
    }
    fn default_delta() -> f64 {
        0.3
    }
}

impl Default for AdversarySection {
    fn default() -> Self {
        toml::from_str("").expect("empty adversary section has defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// "synthetic" | "idx"
    pub source: String,
    #[serde(default)]
    pub idx_images: Option<PathBuf>,
    #[serde(default)]
    pub idx_labels: Option<PathBuf>,
    #[serde(default = "DatasetSection::default_classes")]
    pub classes: usize,
    #[serde(default = "DatasetSection::default_dims")]
    pub dims: usize,
    #[serde(default = "DatasetSection::default_per_class")]
    pub per_class: usize,
    #[serde(default = "DatasetSection::default_spread")]
    pub spread: f64,
    #[serde(default = "DatasetSection::default_classes_per_node")]
    pub classes_per_node: usize,
    /// Shared validation slice size, per class.
    #[serde(default = "DatasetSection::default_val_per_class")]
    pub val_per_class: usize,
    /// Fraction of each node's partition held out as its local test set.
    #[serde(default = "DatasetSection::default_local_test_fraction")]
    pub local_test_fraction: f64,
}

impl DatasetSection {
    fn default_classes() -> usize {
        10
    }
    fn default_dims() -> usize {
        32
    }
    fn default_per_class() -> usize {
        200
    }
    fn default_spread() -> f64 {
        0.15
    }
    fn default_classes_per_node() -> usize {
        2
    }
    fn default_val_per_class() -> usize {
        20
    }
    fn default_local_test_fraction() -> f64 {
        0.2
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "TrainingSection::default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "TrainingSection::default_epochs")]
    pub epochs: u32,
    #[serde(default = "TrainingSection::default_batch_size")]
    pub batch_size: usize,
    /// Per-round training slice drawn from the node's partition.
    #[serde(default = "TrainingSection::default_round_sample")]
    pub round_sample: usize,
    #[serde(default = "TrainingSection::default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub dp_sigma: f64,
    /// Simulated wall time one local training pass takes.
    #[serde(default = "TrainingSection::default_train_duration_ms")]
    pub train_duration_ms: u64,
}

impl TrainingSection {
    fn default_learning_rate() -> f64 {
        0.2
    }
    fn default_epochs() -> u32 {
        1
    }
    fn default_batch_size() -> usize {
        16
    }
    fn default_round_sample() -> usize {
        500
    }
    fn default_hidden() -> usize {
        32
    }
    fn default_train_duration_ms() -> u64 {
        20_000
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        toml::from_str("").expect("empty training section has defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default = "NetworkSection::default_base_latency")]
    pub base_latency_ms: u64,
    #[serde(default = "NetworkSection::default_jitter")]
    pub jitter_ms: u64,
    #[serde(default)]
    pub drop_probability: f64,
    /// Scripted partition windows between two node sets.
    #[serde(default)]
    pub partitions: Vec<PartitionSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub side_a: Vec<u64>,
    pub side_b: Vec<u64>,
    pub start_ms: u64,
    pub end_ms: u64,
}

impl NetworkSection {
    fn default_base_latency() -> u64 {
        50
    }
    fn default_jitter() -> u64 {
        20
    }
}

impl Default for NetworkSection {
    fn default() -> Self {
        toml::from_str("").expect("empty network section has defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// (node, round) pairs; nodes absent here join at round 1.
    #[serde(default)]
    pub joins: Vec<JoinSpec>,
    /// Scripted crashes at absolute simulated times.
    #[serde(default)]
    pub crashes: Vec<CrashSpec>,
    /// Extra per-node training latency (models slow devices whose
    /// updates miss the window and roll forward).
    #[serde(default)]
    pub delays: Vec<DelaySpec>,
    /// Random 120-240 s simulated pauses between rounds.
    #[serde(default)]
    pub inter_round_pause: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec {
    pub node: u64,
    pub extra_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct JoinSpec {
    pub node: u64,
    pub round: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CrashSpec {
    pub node: u64,
    pub at_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub topology: TopologySection,
    pub consensus: ConsensusSection,
    #[serde(default)]
    pub trust: TrustSection,
    #[serde(default)]
    pub adversary: AdversarySection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsensusKind {
    Poq,
    Pofl,
    Flpbft,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigErrors> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            ConfigErrors(vec![ConfigError {
                field: "(toml)".into(),
                reason: e.to_string(),
            }])
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn topology_kind(&self) -> Option<TopologyKind> {
        match self.topology.kind.as_str() {
            "centralized" => Some(TopologyKind::Centralized),
            "hierarchical" => Some(TopologyKind::Hierarchical {
                cluster_size: self.topology.cluster_size.unwrap_or(3),
            }),
            "decentralized" => Some(TopologyKind::Decentralized {
                overlay_degree: self.topology.overlay_degree.unwrap_or(3),
            }),
            _ => None,
        }
    }

    pub fn consensus_kind(&self) -> Option<ConsensusKind> {
        match self.consensus.kind.as_str() {
            "poq" => Some(ConsensusKind::Poq),
            "pofl" => Some(ConsensusKind::Pofl),
            "flpbft" => Some(ConsensusKind::Flpbft),
            _ => None,
        }
    }

    pub fn admission_policy(&self) -> Option<AdmissionPolicy> {
        match self.trust.model.as_str() {
            "permissionless" => Some(AdmissionPolicy::Permissionless {
                stake_minimum: self.trust.stake_minimum,
            }),
            "consortium" => Some(AdmissionPolicy::Consortium {
                approvers_required: self.trust.approvers_required,
            }),
            "permissioned" => Some(AdmissionPolicy::Permissioned {
                role_table: BTreeSet::from_iter(self.trust.role_table.iter().cloned()),
            }),
            _ => None,
        }
    }

    pub fn adversary_spec(&self) -> Option<AdversarySpec> {
        let behavior = match self.adversary.behavior.as_str() {
            "sign-flip" => AdversaryBehavior::SignFlip,
            "scale" => AdversaryBehavior::Scale {
                factor: self.adversary.factor,
            },
            "gaussian-noise" => AdversaryBehavior::GaussianNoise {
                sigma: self.adversary.sigma,
            },
            "accuracy-spoof" => AdversaryBehavior::AccuracySpoof {
                delta: self.adversary.delta,
            },
            _ => return None,
        };
        Some(AdversarySpec {
            fraction: self.adversary.fraction,
            behavior,
            seed: self.adversary.seed,
        })
    }

    /// Check every constraint, reporting all violations with field paths.
    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut errs: Vec<ConfigError> = Vec::new();
        let mut bad = |field: &str, reason: String| {
            errs.push(ConfigError {
                field: field.to_string(),
                reason,
            })
        };

        if self.experiment.nodes < 2 {
            bad("experiment.nodes", "need at least 2 nodes".into());
        }
        if self.experiment.rounds < 1 {
            bad("experiment.rounds", "need at least 1 round".into());
        }
        if self.experiment.collection_window_ms == 0 {
            bad("experiment.collection_window_ms", "must be positive".into());
        }

        let topo = self.topology_kind();
        if topo.is_none() {
            bad(
                "topology.kind",
                format!(
                    "unknown kind {:?} (expected centralized|hierarchical|decentralized)",
                    self.topology.kind
                ),
            );
        }
        if let Some(TopologyKind::Hierarchical { cluster_size }) = topo {
            if cluster_size < 2 {
                bad("topology.cluster_size", "must be >= 2".into());
            }
        }
        if let Some(TopologyKind::Decentralized { overlay_degree }) = topo {
            if overlay_degree < 2 {
                bad("topology.overlay_degree", "must be >= 2".into());
            }
            if overlay_degree >= self.experiment.nodes as usize {
                bad(
                    "topology.overlay_degree",
                    format!("must be below node count {}", self.experiment.nodes),
                );
            }
        }

        let consensus = self.consensus_kind();
        match consensus {
            None => bad(
                "consensus.kind",
                format!(
                    "unknown kind {:?} (expected poq|pofl|flpbft)",
                    self.consensus.kind
                ),
            ),
            Some(kind) => {
                // Binding matrix: decentralized peers have no quality
                // leader, and per-region mining has no meaningful loss.
                let compatible = match (topo, kind) {
                    (Some(TopologyKind::Decentralized { .. }), ConsensusKind::Poq) => false,
                    (Some(TopologyKind::Hierarchical { .. }), ConsensusKind::Pofl) => false,
                    _ => true,
                };
                if !compatible {
                    bad(
                        "consensus.kind",
                        format!(
                            "{} does not bind to {} topology",
                            self.consensus.kind, self.topology.kind
                        ),
                    );
                }
            }
        }
        for (field, value) in [
            ("consensus.accuracy_tolerance", self.consensus.accuracy_tolerance),
            ("consensus.claim_tolerance", self.consensus.claim_tolerance),
            ("consensus.exclusion_margin", self.consensus.exclusion_margin),
            ("consensus.loss_tolerance", self.consensus.loss_tolerance),
            ("consensus.alpha", self.consensus.alpha),
            ("consensus.magnitude_factor", self.consensus.magnitude_factor),
            ("consensus.quality_floor_margin", self.consensus.quality_floor_margin),
        ] {
            if !(value >= 0.0) || !value.is_finite() {
                bad(field, format!("must be finite and >= 0, got {value}"));
            }
        }
        if self.consensus.target_shift >= 256 {
            bad("consensus.target_shift", "must be below 256".into());
        }
        if self.consensus.max_attempts == 0 {
            bad("consensus.max_attempts", "must be >= 1".into());
        }

        if self.admission_policy().is_none() {
            bad(
                "trust.model",
                format!(
                    "unknown model {:?} (expected permissionless|consortium|permissioned)",
                    self.trust.model
                ),
            );
        } else if let Some(policy) = self.admission_policy() {
            if let Err(e) = policy.validate() {
                bad("trust", e.to_string());
            }
        }

        match self.adversary_spec() {
            None => bad(
                "adversary.behavior",
                format!("unknown behavior {:?}", self.adversary.behavior),
            ),
            Some(spec) => {
                if let Err(e) = spec.validate() {
                    bad("adversary", e.to_string());
                }
            }
        }

        match self.dataset.source.as_str() {
            "synthetic" => {
                if self.dataset.classes < 2 {
                    bad("dataset.classes", "need at least 2 classes".into());
                }
                if self.dataset.dims == 0 {
                    bad("dataset.dims", "must be positive".into());
                }
                if self.dataset.per_class == 0 {
                    bad("dataset.per_class", "must be positive".into());
                }
            }
            "idx" => {
                if self.dataset.idx_images.is_none() {
                    bad("dataset.idx_images", "required for source = \"idx\"".into());
                }
                if self.dataset.idx_labels.is_none() {
                    bad("dataset.idx_labels", "required for source = \"idx\"".into());
                }
            }
            other => bad(
                "dataset.source",
                format!("unknown source {other:?} (expected synthetic|idx)"),
            ),
        }
        if self.dataset.classes_per_node == 0 {
            bad("dataset.classes_per_node", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dataset.local_test_fraction) {
            bad(
                "dataset.local_test_fraction",
                format!("must be in [0,1), got {}", self.dataset.local_test_fraction),
            );
        }

        if !(self.training.learning_rate >= 0.0) {
            bad("training.learning_rate", "must be >= 0".into());
        }
        if self.training.epochs == 0 {
            bad("training.epochs", "must be >= 1".into());
        }
        if self.training.batch_size == 0 {
            bad("training.batch_size", "must be >= 1".into());
        }
        if self.training.round_sample == 0 {
            bad("training.round_sample", "must be >= 1".into());
        }
        if self.training.hidden == 0 {
            bad("training.hidden", "must be >= 1".into());
        }
        if self.training.dp_sigma < 0.0 {
            bad("training.dp_sigma", "must be >= 0".into());
        }

        if !(0.0..=1.0).contains(&self.network.drop_probability) {
            bad(
                "network.drop_probability",
                format!("must be in [0,1], got {}", self.network.drop_probability),
            );
        }
        for (i, p) in self.network.partitions.iter().enumerate() {
            if p.end_ms < p.start_ms {
                bad(
                    &format!("network.partitions[{i}]"),
                    format!("end {} before start {}", p.end_ms, p.start_ms),
                );
            }
        }

        for (i, join) in self.schedule.joins.iter().enumerate() {
            if join.node >= self.experiment.nodes {
                bad(
                    &format!("schedule.joins[{i}].node"),
                    format!("node {} out of range 0..{}", join.node, self.experiment.nodes),
                );
            }
            if join.round < 1 || join.round > self.experiment.rounds {
                bad(
                    &format!("schedule.joins[{i}].round"),
                    format!("round {} outside 1..={}", join.round, self.experiment.rounds),
                );
            }
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errs))
        }
    }
}
