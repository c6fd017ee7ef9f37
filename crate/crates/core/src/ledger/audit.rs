//! Immutable per-round audit trail.

use serde::Serialize;

use crate::crypto::{Hash32, NodeId};

use super::LedgerError;

/// Who participated in a committed round, under which model root, and how
/// well the committed model validated.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundAuditRecord {
    pub round: u64,
    /// (node, key fingerprint) pairs, node order.
    pub participants: Vec<(NodeId, Hash32)>,
    pub model_root: Hash32,
    pub validation_score: f64,
    pub timestamp_ms: u64,
}

#[derive(Serialize)]
struct ParticipantJson {
    node: NodeId,
    key: String,
}

#[derive(Serialize)]
struct AuditJson {
    round: u64,
    participants: Vec<ParticipantJson>,
    model_root: String,
    validation_score: f64,
    timestamp_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    records: Vec<RoundAuditRecord>,
}

impl AuditLog {
    pub fn new() -> Self {
        AuditLog::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[RoundAuditRecord] {
        &self.records
    }

    /// Append-only with strictly increasing rounds.
    pub fn append(&mut self, record: RoundAuditRecord) -> Result<(), LedgerError> {
        if let Some(last) = self.records.last() {
            if record.round <= last.round {
                return Err(LedgerError::NonMonotonicRound {
                    last: last.round,
                    got: record.round,
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// One JSON object per line.
    pub fn export_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            let row = AuditJson {
                round: rec.round,
                participants: rec
                    .participants
                    .iter()
                    .map(|(node, key)| ParticipantJson {
                        node: *node,
                        key: key.to_hex(),
                    })
                    .collect(),
                model_root: rec.model_root.to_hex(),
                validation_score: rec.validation_score,
                timestamp_ms: rec.timestamp_ms,
            };
            out.push_str(&serde_json::to_string(&row).expect("audit row serializes"));
            out.push('\n');
        }
        out
    }
}
