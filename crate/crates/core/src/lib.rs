//! Hierarchical log anomaly analytics.
//!
//! Templates are mapped to `(entity, action, status)` triples which form a
//! four-level [`ExecTree`]. Each template-ID sequence is cut into contiguous
//! execution units ([`ExecSeq`]) at status, action and entity level; units are
//! checked bottom-up against a [`KnowledgeBase`] of known patterns, and only
//! unknown units are sent to an LLM. Verdicts are stored for reuse and can be
//! overridden by a human.

pub mod corpus;
pub mod decompose;
pub mod detector;
pub mod error;
pub mod hdfs;
pub mod hierarchy;
pub mod kb;
pub mod llm;
pub mod metrics;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use corpus::{LogSequence, SequenceCorpus, Split, TemplateCatalog, TemplateId};
pub use decompose::{decompose, ExecSeq, ExecSeqSet};
pub use detector::{detect_sequence, DetectionReport, DetectorConfig, LlmMode};
pub use error::Error;
pub use hierarchy::{build_tree, ExecTree, SemanticTriple};
pub use kb::{KnowledgeBase, KnowledgeEntry, Provenance, ScopeKey, SharedKb};
pub use llm::LlmClient;
pub use metrics::{evaluate, Metrics};

/// Sequence- or unit-level verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomaly,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "Normal",
            Label::Anomaly => "Anomaly",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(Label::Normal),
            "anomaly" | "anomalous" => Ok(Label::Anomaly),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// Granularity of an execution unit. Ordered bottom-up: `S < A < E`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    /// Statuses under one action.
    #[serde(rename = "S")]
    Status,
    /// Actions under one entity.
    #[serde(rename = "A")]
    Action,
    /// Entities under the root.
    #[serde(rename = "E")]
    Entity,
}

impl Level {
    pub const BOTTOM_UP: [Level; 3] = [Level::Status, Level::Action, Level::Entity];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Status => "S",
            Level::Action => "A",
            Level::Entity => "E",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "S" | "s" | "status" => Ok(Level::Status),
            "A" | "a" | "action" => Ok(Level::Action),
            "E" | "e" | "entity" => Ok(Level::Entity),
            other => Err(format!("unknown level {other:?}")),
        }
    }
}
