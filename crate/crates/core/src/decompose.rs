//! Cutting a flat template sequence into execution units.
//!
//! Events are annotated with their leaf path, then split into maximal runs:
//! an entity run is a maximal block of consecutive events with the same
//! entity, and inside it an action run is a maximal block with the same
//! action. Each action run is one S-seq, each entity run one A-seq, and the
//! whole sequence one E-seq. Interleaved entities are not regrouped.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{LogSequence, TemplateId};
use crate::hierarchy::{lookup_leaf, ExecTree, HierarchyError, LeafPath, NodeId};
use crate::kb::ScopeKey;
use crate::Level;

#[derive(Debug, thiserror::Error)]
pub enum DecomposeError {
    #[error("sequence {0} has no events")]
    EmptySequence(String),
    #[error("template {0} is not bound to a leaf")]
    UnboundTemplate(TemplateId),
    #[error("span {start}..{end} is outside a sequence of length {len}")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
}

impl DecomposeError {
    pub fn code(&self) -> &'static str {
        match self {
            DecomposeError::EmptySequence(_) => "EmptySequence",
            DecomposeError::UnboundTemplate(_) => "UnboundTemplate",
            DecomposeError::SpanOutOfBounds { .. } => "SpanOutOfBounds",
        }
    }
}

/// Half-open event interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// One execution unit: a parent node and the ordered children it ran through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecSeq {
    pub level: Level,
    pub parent: NodeId,
    /// Labels from the root to `parent`, inclusive.
    pub parent_path: Vec<String>,
    pub nodes: Vec<NodeId>,
    pub node_labels: Vec<String>,
    pub span: Span,
    pub source_sequence_id: String,
}

impl ExecSeq {
    pub fn key(&self) -> ScopeKey {
        ScopeKey { level: self.level, parent_path: self.parent_path.clone(), node_labels: self.node_labels.clone() }
    }

    pub fn parent_label(&self) -> &str {
        self.parent_path.last().map(String::as_str).unwrap_or("")
    }

    /// `<parent> → <node sequence>`.
    pub fn rendered(&self) -> String {
        render(self.parent_label(), &self.node_labels)
    }
}

pub fn render<S: AsRef<str>>(parent: &str, nodes: &[S]) -> String {
    let nodes: Vec<&str> = nodes.iter().map(AsRef::as_ref).collect();
    format!("{parent} → {}", nodes.join(", "))
}

/// All execution units of one sequence, in span order per level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecSeqSet {
    pub sequence_id: String,
    pub s_seqs: Vec<ExecSeq>,
    pub a_seqs: Vec<ExecSeq>,
    pub e_seqs: Vec<ExecSeq>,
}

impl ExecSeqSet {
    pub fn level(&self, level: Level) -> &[ExecSeq] {
        match level {
            Level::Status => &self.s_seqs,
            Level::Action => &self.a_seqs,
            Level::Entity => &self.e_seqs,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExecSeq> {
        self.s_seqs.iter().chain(&self.a_seqs).chain(&self.e_seqs)
    }

    pub fn len(&self) -> usize {
        self.s_seqs.len() + self.a_seqs.len() + self.e_seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn annotate(sequence: &LogSequence, tree: &ExecTree) -> Result<Vec<LeafPath>, DecomposeError> {
    sequence
        .events
        .iter()
        .map(|e| {
            lookup_leaf(tree, e).map_err(|err| match err {
                HierarchyError::UnboundTemplate(id) => DecomposeError::UnboundTemplate(id),
                _ => DecomposeError::UnboundTemplate(e.clone()),
            })
        })
        .collect()
}

/// Maximal runs of equal keys, as half-open index ranges.
fn runs<K: PartialEq>(keys: impl IntoIterator<Item = K>, offset: usize) -> Vec<Span> {
    let mut out = Vec::new();
    let mut start = offset;
    let mut prev: Option<K> = None;
    let mut i = offset;
    for k in keys {
        if let Some(p) = &prev {
            if *p != k {
                out.push(Span::new(start, i));
                start = i;
            }
        }
        prev = Some(k);
        i += 1;
    }
    if i > start {
        out.push(Span::new(start, i));
    }
    out
}

pub fn decompose(sequence: &LogSequence, tree: &ExecTree) -> Result<ExecSeqSet, DecomposeError> {
    if sequence.events.is_empty() {
        return Err(DecomposeError::EmptySequence(sequence.sequence_id.clone()));
    }
    let paths = annotate(sequence, tree)?;
    let make = |level, parent: NodeId, nodes: Vec<NodeId>, span| ExecSeq {
        level,
        parent,
        parent_path: tree.label_path(parent),
        node_labels: nodes.iter().map(|n| tree.label(*n).to_string()).collect(),
        nodes,
        span,
        source_sequence_id: sequence.sequence_id.clone(),
    };

    let mut s_seqs = Vec::new();
    let mut a_seqs = Vec::new();
    let mut entities = Vec::new();
    for entity_run in runs(paths.iter().map(|p| p.entity), 0) {
        let entity = paths[entity_run.start].entity;
        let action_runs = runs(paths[entity_run.range()].iter().map(|p| p.action), entity_run.start);
        let mut actions = Vec::with_capacity(action_runs.len());
        for action_run in action_runs {
            let action = paths[action_run.start].action;
            let statuses = paths[action_run.range()].iter().map(|p| p.status).collect();
            s_seqs.push(make(Level::Status, action, statuses, action_run));
            actions.push(action);
        }
        a_seqs.push(make(Level::Action, entity, actions, entity_run));
        entities.push(entity);
    }
    let e_seq = make(Level::Entity, NodeId::ROOT, entities, Span::new(0, paths.len()));
    Ok(ExecSeqSet { sequence_id: sequence.sequence_id.clone(), s_seqs, a_seqs, e_seqs: vec![e_seq] })
}

pub fn segment_events<'a>(seq: &ExecSeq, source: &'a LogSequence) -> Result<&'a [TemplateId], DecomposeError> {
    let len = source.events.len();
    if seq.span.start >= seq.span.end || seq.span.end > len {
        return Err(DecomposeError::SpanOutOfBounds { start: seq.span.start, end: seq.span.end, len });
    }
    Ok(&source.events[seq.span.range()])
}

/// Per-sequence export consumed by the aligned view and the CLI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionRecord {
    pub sequence_id: String,
    pub events: Vec<TemplateId>,
    pub segments: Vec<SegmentRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub level: Level,
    pub parent_path: Vec<String>,
    pub nodes: Vec<String>,
    pub span: Span,
    pub rendered: String,
    pub key: String,
}

impl DecompositionRecord {
    pub fn new(sequence: &LogSequence, set: &ExecSeqSet) -> Self {
        let segments = set
            .iter()
            .map(|s| SegmentRecord {
                level: s.level,
                parent_path: s.parent_path.clone(),
                nodes: s.node_labels.clone(),
                span: s.span,
                rendered: s.rendered(),
                key: s.key().canonical(),
            })
            .collect();
        Self { sequence_id: sequence.sequence_id.clone(), events: sequence.events.clone(), segments }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TemplateCatalog;
    use crate::hierarchy::{build_tree, SemanticTriple};
    use proptest::prelude::*;

    fn tree3() -> ExecTree {
        let cat = TemplateCatalog::from_pairs([("T1", "a"), ("T2", "b"), ("T3", "c")]).unwrap();
        let triples = [
            SemanticTriple::new("T1", "session", "open", "started").unwrap(),
            SemanticTriple::new("T2", "session", "open", "succeeded").unwrap(),
            SemanticTriple::new("T3", "block", "write", "started").unwrap(),
        ];
        build_tree(&cat, &triples).unwrap()
    }

    fn seq(events: &[&str]) -> LogSequence {
        LogSequence::new("x", events.iter().copied(), None)
    }

    fn summary(s: &ExecSeq) -> (String, Vec<String>, (usize, usize)) {
        (s.parent_label().to_string(), s.node_labels.clone(), (s.span.start, s.span.end))
    }

    fn v(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn annotate_in_order() {
        let tree = tree3();
        let paths = annotate(&seq(&["T1", "T2", "T3"]), &tree).unwrap();
        let labels: Vec<_> = paths.iter().map(|p| tree.label(p.status)).collect();
        assert_eq!(labels, ["started", "succeeded", "started"]);
        assert_eq!(tree.label(paths[2].entity), "block");
        assert!(
            matches!(annotate(&seq(&["T1", "T9"]), &tree), Err(DecomposeError::UnboundTemplate(id)) if id.as_str() == "T9")
        );
    }

    #[test]
    fn worked_example() {
        let tree = tree3();
        let set = decompose(&seq(&["T1", "T2", "T3"]), &tree).unwrap();
        let s: Vec<_> = set.s_seqs.iter().map(summary).collect();
        assert_eq!(
            s,
            vec![("open".into(), v(&["started", "succeeded"]), (0, 2)), ("write".into(), v(&["started"]), (2, 3))]
        );
        let a: Vec<_> = set.a_seqs.iter().map(summary).collect();
        assert_eq!(a, vec![("session".into(), v(&["open"]), (0, 2)), ("block".into(), v(&["write"]), (2, 3))]);
        let e: Vec<_> = set.e_seqs.iter().map(summary).collect();
        assert_eq!(e, vec![("root".into(), v(&["session", "block"]), (0, 3))]);
        assert_eq!(set.s_seqs[0].rendered(), "open → started, succeeded");
        assert_eq!(set.s_seqs[0].parent_path, v(&["root", "session", "open"]));
        assert_eq!(set.a_seqs[1].parent_path, v(&["root", "block"]));
    }

    #[test]
    fn single_event() {
        let set = decompose(&seq(&["T3"]), &tree3()).unwrap();
        for level in Level::BOTTOM_UP {
            let segs = set.level(level);
            assert_eq!(segs.len(), 1);
            assert_eq!(segs[0].span, Span::new(0, 1));
        }
    }

    #[test]
    fn alternating_entities() {
        let set = decompose(&seq(&["T1", "T3", "T1"]), &tree3()).unwrap();
        assert_eq!(set.e_seqs[0].node_labels, v(&["session", "block", "session"]));
        assert_eq!(set.a_seqs.len(), 3);
        assert_eq!(set.s_seqs.len(), 3);
    }

    #[test]
    fn empty_sequence() {
        assert!(matches!(decompose(&seq(&[]), &tree3()), Err(DecomposeError::EmptySequence(_))));
    }

    #[test]
    fn segment_slices() {
        let tree = tree3();
        let source = seq(&["T1", "T2", "T3"]);
        let set = decompose(&source, &tree).unwrap();
        let ids = |s: &[TemplateId]| s.iter().map(|t| t.to_string()).collect::<Vec<_>>();
        assert_eq!(ids(segment_events(&set.s_seqs[0], &source).unwrap()), ["T1", "T2"]);
        assert_eq!(ids(segment_events(&set.s_seqs[1], &source).unwrap()), ["T3"]);
        assert_eq!(segment_events(&set.e_seqs[0], &source).unwrap(), source.events.as_slice());
        let mut bad = set.s_seqs[1].clone();
        bad.span = Span::new(2, 4);
        assert!(matches!(segment_events(&bad, &source), Err(DecomposeError::SpanOutOfBounds { .. })));
    }

    #[test]
    fn export_record() {
        let source = seq(&["T1", "T2", "T3"]);
        let rec = DecompositionRecord::new(&source, &decompose(&source, &tree3()).unwrap());
        assert_eq!(rec.segments.len(), 5);
        assert_eq!(rec.segments[0].key, "S|root/session/open|started,succeeded");
        let json = serde_json::to_value(&rec).unwrap();
        assert_eq!(json["segments"][0]["level"], "S");
        assert_eq!(json["segments"][0]["span"]["end"], 2);
    }

    proptest! {
        #[test]
        fn reconstruction_and_composition(events in proptest::collection::vec(0usize..3, 1..40)) {
            let tree = tree3();
            let names = ["T1", "T2", "T3"];
            let source = seq(&events.iter().map(|i| names[*i]).collect::<Vec<_>>());
            let set = decompose(&source, &tree).unwrap();
            let mut rebuilt = Vec::new();
            for s in &set.s_seqs {
                rebuilt.extend_from_slice(segment_events(s, &source).unwrap());
            }
            prop_assert_eq!(&rebuilt, &source.events);
            prop_assert_eq!(set.e_seqs.len(), 1);
            prop_assert_eq!(set.e_seqs[0].nodes.len(), set.a_seqs.len());
            let total: usize = set.a_seqs.iter().map(|a| a.nodes.len()).sum();
            prop_assert_eq!(total, set.s_seqs.len());
            for w in set.a_seqs.windows(2) {
                prop_assert_ne!(w[0].parent, w[1].parent);
            }
            prop_assert_eq!(decompose(&source, &tree).unwrap(), set);
        }
    }
}
