use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeReport {
    pub index: u8,
    pub phase: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    pub output_ciphertexts: usize,
    pub history: Vec<String>,
}

/// Everything a run produced that is observable outside the actors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub group_profile: String,
    pub function: String,
    /// `DONE`, `ABORTED` or `REJECTED`.
    pub outcome: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Present iff the outcome is `DONE`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<BTreeMap<String, String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub transcript_digest: String,
    pub envelope_count: usize,
    pub ledger_head: String,
    pub ledger_entries: usize,
    pub nodes: Vec<NodeReport>,
    pub warnings: Vec<String>,
    pub assertions: BTreeMap<String, bool>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn all_assertions_hold(&self) -> bool {
        self.assertions.values().all(|v| *v)
    }

    pub fn failed_assertions(&self) -> Vec<&str> {
        self.assertions.iter().filter(|(_, v)| !**v).map(|(k, _)| k.as_str()).collect()
    }

    pub fn is_done(&self) -> bool {
        self.outcome == "DONE"
    }

    pub fn total_output_ciphertexts(&self) -> usize {
        self.nodes.iter().map(|n| n.output_ciphertexts).sum()
    }
}
