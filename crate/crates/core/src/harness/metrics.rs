//! Per-round metrics rows and their JSONL/CSV emission.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crypto::NodeId;

/// Message kinds counted per round. Coordination kinds move models and
/// updates; consensus kinds carry votes, blocks, and agreement traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MsgKind {
    /// Root to regional aggregators (hierarchical global layer).
    ModelDownGlobal,
    /// Aggregator or regional aggregator to trainers.
    ModelDown,
    /// Trainer update to its collection point.
    UpdateUp,
    /// Regional exact pre-aggregate up to the root (global layer).
    RegionalUp,
    /// Collection point redistributing the round's updates to validators.
    Package,
    /// Root redistributing regional aggregates to the committee.
    RegionPackage,
    /// First-hop gossip of a node's own update to its overlay neighbors.
    GossipPush,
    /// Relayed gossip of someone else's update.
    GossipForward,
    /// Leader's aggregation proposal.
    Proposal,
    /// Validator accept/reject.
    Vote,
    /// Commit/abort notice.
    Outcome,
    /// Mined block announcement.
    MiningAnnounce,
    PbftPrePrepare,
    PbftPrepare,
    PbftCommit,
}

impl MsgKind {
    pub fn label(self) -> &'static str {
        match self {
            MsgKind::ModelDownGlobal => "model_down_global",
            MsgKind::ModelDown => "model_down",
            MsgKind::UpdateUp => "update_up",
            MsgKind::RegionalUp => "regional_up",
            MsgKind::Package => "package",
            MsgKind::RegionPackage => "region_package",
            MsgKind::GossipPush => "gossip_push",
            MsgKind::GossipForward => "gossip_forward",
            MsgKind::Proposal => "proposal",
            MsgKind::Vote => "vote",
            MsgKind::Outcome => "outcome",
            MsgKind::MiningAnnounce => "mining_announce",
            MsgKind::PbftPrePrepare => "pbft_pre_prepare",
            MsgKind::PbftPrepare => "pbft_prepare",
            MsgKind::PbftCommit => "pbft_commit",
        }
    }

    /// Kinds that move models and updates (Table-style coordination
    /// traffic), as opposed to consensus voting traffic.
    pub fn is_coordination(self) -> bool {
        matches!(
            self,
            MsgKind::ModelDownGlobal
                | MsgKind::ModelDown
                | MsgKind::UpdateUp
                | MsgKind::RegionalUp
                | MsgKind::Package
                | MsgKind::RegionPackage
                | MsgKind::GossipPush
                | MsgKind::GossipForward
        )
    }
}

/// One row per attempted round, failed rounds included.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    pub committed: bool,
    /// Accuracy of the committed global model on the shared validation
    /// slice; absent for failed rounds.
    pub global_score: Option<f64>,
    /// Per-node accuracy of the post-round global model on each node's
    /// local test split.
    pub local_accuracy: BTreeMap<NodeId, f64>,
    pub participants: Vec<NodeId>,
    pub messages: BTreeMap<String, u64>,
    pub bytes_sent: u64,
    pub duration_ms: u64,
    pub model_root: Option<String>,
    pub suspects: Vec<NodeId>,
    pub rewards: BTreeMap<NodeId, u64>,
    pub reputation: BTreeMap<NodeId, f64>,
}

impl MetricsRow {
    pub fn messages_total(&self) -> u64 {
        self.messages.values().sum()
    }

    pub fn coordination_total(&self) -> u64 {
        self.messages
            .iter()
            .filter(|(k, _)| COORDINATION_LABELS.contains(&k.as_str()))
            .map(|(_, v)| v)
            .sum()
    }

    /// Root <-> regional traffic in hierarchical runs.
    pub fn global_layer_total(&self) -> u64 {
        self.messages
            .iter()
            .filter(|(k, _)| GLOBAL_LAYER_LABELS.contains(&k.as_str()))
            .map(|(_, v)| v)
            .sum()
    }
}

const COORDINATION_LABELS: &[&str] = &[
    "model_down_global",
    "model_down",
    "update_up",
    "regional_up",
    "package",
    "region_package",
    "gossip_push",
    "gossip_forward",
];

const GLOBAL_LAYER_LABELS: &[&str] = &[
    "model_down_global",
    "regional_up",
    "region_package",
    "proposal",
    "vote",
    "outcome",
];

/// Serialize rows as JSON-lines, one row per line.
pub fn to_jsonl(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("metrics row serializes"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<MetricsRow>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// CSV summary: round, global_score, messages_total, duration_ms.
pub fn to_summary_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("round,global_score,messages_total,duration_ms\n");
    for row in rows {
        let score = row
            .global_score
            .map(|s| format!("{s}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.round,
            score,
            row.messages_total(),
            row.duration_ms
        ));
    }
    out
}

#[derive(Debug, Error)]
pub enum MetricsIoError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

use thiserror::Error;

/// Write `metrics.jsonl`, `summary.csv`, `chain.hex`, and `audit.jsonl`
/// under `dir`; returns the paths written.
pub fn emit_metrics(
    rows: &[MetricsRow],
    chain_dump: &str,
    audit_jsonl: &str,
    dir: &Path,
) -> Result<Vec<PathBuf>, MetricsIoError> {
    std::fs::create_dir_all(dir).map_err(|source| MetricsIoError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let files = [
        ("metrics.jsonl", to_jsonl(rows)),
        ("summary.csv", to_summary_csv(rows)),
        ("chain.hex", chain_dump.to_string()),
        ("audit.jsonl", audit_jsonl.to_string()),
    ];
    let mut written = Vec::new();
    for (name, content) in files {
        let path = dir.join(name);
        std::fs::File::create(&path)
            .and_then(|mut f| f.write_all(content.as_bytes()))
            .map_err(|source| MetricsIoError::Io {
                path: path.display().to_string(),
                source,
            })?;
        written.push(path);
    }
    Ok(written)
}
