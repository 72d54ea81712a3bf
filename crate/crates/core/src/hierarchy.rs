//! Semantic triples and the four-level execution tree.
//!
//! Every template is labeled with an `(entity, action, status)` triple. The
//! tree groups templates as root → entity → action → status, and each status
//! leaf is bound to exactly one template. Two templates with the same triple
//! get sibling leaves `status#1`, `status#2`, ... in template-id order.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TemplateCatalog, TemplateId};
use crate::llm::{parse_triple, ExtractRequest, FixtureLlm, LlmClient, LlmError};

pub const ROOT_LABEL: &str = "root";

#[derive(Debug, thiserror::Error)]
pub enum HierarchyError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("extraction response for {template_id} is missing entity/action/status: {raw:?}")]
    ExtractionInvalid { template_id: TemplateId, raw: String },
    #[error("empty {field} token for template {template_id}")]
    EmptyToken { template_id: TemplateId, field: &'static str },
    #[error("no triple for template {0}")]
    MissingTriple(TemplateId),
    #[error("more than one triple for template {0}")]
    DuplicateTriple(TemplateId),
    #[error("triple given for template {0}, which is not in the catalog")]
    TripleForUnknownTemplate(TemplateId),
    #[error("template {0} is not bound to a leaf")]
    UnboundTemplate(TemplateId),
}

impl HierarchyError {
    pub fn code(&self) -> &'static str {
        match self {
            HierarchyError::Llm(_) => "LlmUnavailable",
            HierarchyError::ExtractionInvalid { .. } => "ExtractionInvalid",
            HierarchyError::EmptyToken { .. } => "ExtractionInvalid",
            HierarchyError::MissingTriple(_) => "MissingTriple",
            HierarchyError::DuplicateTriple(_) => "DuplicateTriple",
            HierarchyError::TripleForUnknownTemplate(_) => "TripleForUnknownTemplate",
            HierarchyError::UnboundTemplate(_) => "UnboundTemplate",
        }
    }
}

/// Canonical label token: lowercase, separators collapsed to a single `_`.
///
/// Only alphanumerics, `_`, `-` and `.` survive; anything else (whitespace,
/// `/`, `|`, `,`, `#`, ...) becomes a separator so rendered keys stay
/// unambiguous and `#` stays reserved for disambiguation suffixes.
pub fn normalize_token(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_sep = false;
    for c in raw.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() || c == '-' || c == '.' {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.push(c);
        } else {
            pending_sep = true;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticTriple {
    pub template_id: TemplateId,
    pub entity: String,
    pub action: String,
    pub status: String,
}

impl SemanticTriple {
    /// Normalizes all three tokens; fails if any becomes empty.
    pub fn new(
        template_id: impl Into<TemplateId>,
        entity: &str,
        action: &str,
        status: &str,
    ) -> Result<Self, HierarchyError> {
        let template_id = template_id.into();
        let token = |raw: &str, field| {
            let t = normalize_token(raw);
            if t.is_empty() {
                Err(HierarchyError::EmptyToken { template_id: template_id.clone(), field })
            } else {
                Ok(t)
            }
        };
        let (entity, action, status) = (token(entity, "entity")?, token(action, "action")?, token(status, "status")?);
        Ok(Self { template_id, entity, action, status })
    }

    fn semantic_key(&self) -> (&str, &str, &str) {
        (&self.entity, &self.action, &self.status)
    }
}

/// Result of labeling one template, with the raw model output kept for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub triple: SemanticTriple,
    pub raw_response: String,
    pub llm_calls: usize,
}

/// Labels one template. A response that cannot be parsed is retried once.
pub fn extract_semantics(
    template_id: &TemplateId,
    text: &str,
    llm: &dyn LlmClient,
) -> Result<Extraction, HierarchyError> {
    let request = ExtractRequest { template_id: template_id.clone(), text: text.to_string() };
    let mut raw = String::new();
    for attempt in 1..=2 {
        raw = llm.extract(&request)?;
        if let Some((e, a, s)) = parse_triple(&raw) {
            if let Ok(triple) = SemanticTriple::new(template_id.clone(), &e, &a, &s) {
                return Ok(Extraction { triple, raw_response: raw, llm_calls: attempt });
            }
        }
        log::warn!("unparseable extraction for {template_id} (attempt {attempt}): {raw:?}");
    }
    Err(HierarchyError::ExtractionInvalid { template_id: template_id.clone(), raw })
}

/// Labels the whole catalog. Templates covered by `fixture` never reach `llm`;
/// the rest are extracted concurrently with at most `parallelism` in flight.
pub fn extract_catalog(
    catalog: &TemplateCatalog,
    fixture: Option<&FixtureLlm>,
    llm: &dyn LlmClient,
    parallelism: usize,
) -> Result<Vec<Extraction>, HierarchyError> {
    let items: Vec<(&TemplateId, &str)> = catalog.iter().collect();
    let run = |(id, text): &(&TemplateId, &str)| match fixture {
        Some(f) if f.covers(id) => extract_semantics(id, text, f),
        _ => extract_semantics(id, text, llm),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(parallelism.max(1)).build().expect("thread pool");
    pool.install(|| items.par_iter().map(run).collect())
}

/// Writes triples in the fixture CSV layout (`template_id,entity,action,status`).
pub fn write_triples<W: Write>(triples: &[SemanticTriple], w: W) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| std::io::Error::other(e.to_string());
    wtr.write_record(["template_id", "entity", "action", "status"]).map_err(io)?;
    for t in triples {
        wtr.write_record([t.template_id.as_str(), &t.entity, &t.action, &t.status]).map_err(io)?;
    }
    wtr.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeLevel {
    Root,
    Entity,
    Action,
    Status,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub level: NodeLevel,
    pub label: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub template_id: Option<TemplateId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecTree {
    nodes: Vec<TreeNode>,
    leaves: BTreeMap<TemplateId, NodeId>,
}

/// Root-to-leaf path for one template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LeafPath {
    pub entity: NodeId,
    pub action: NodeId,
    pub status: NodeId,
}

impl ExecTree {
    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> Option<&TreeNode> {
        self.nodes.get(id.index())
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.index()].label
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = &TreeNode> {
        self.nodes[id.index()].children.iter().map(|c| &self.nodes[c.index()])
    }

    pub fn template_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf(&self, template_id: &TemplateId) -> Option<NodeId> {
        self.leaves.get(template_id).copied()
    }

    pub fn leaf_bindings(&self) -> impl Iterator<Item = (&TemplateId, NodeId)> {
        self.leaves.iter().map(|(k, v)| (k, *v))
    }

    /// Labels from the root down to `id`, inclusive.
    pub fn label_path(&self, id: NodeId) -> Vec<String> {
        let mut path = Vec::with_capacity(4);
        let mut cur = Some(id);
        while let Some(n) = cur.and_then(|c| self.node(c)) {
            path.push(n.label.clone());
            cur = n.parent;
        }
        path.reverse();
        path
    }

    /// Resolves a label path such as `["root", "session", "open"]`.
    pub fn find_path<S: AsRef<str>>(&self, labels: &[S]) -> Option<NodeId> {
        let (first, rest) = labels.split_first()?;
        if first.as_ref() != ROOT_LABEL {
            return None;
        }
        let mut cur = NodeId::ROOT;
        for label in rest {
            cur = self.children(cur).find(|c| c.label == label.as_ref())?.id;
        }
        Some(cur)
    }

    fn add_child(&mut self, parent: NodeId, level: NodeLevel, label: &str) -> NodeId {
        if let Some(existing) = self.children(parent).find(|c| c.label == label) {
            return existing.id;
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(TreeNode {
            id,
            level,
            label: label.to_string(),
            parent: Some(parent),
            children: Vec::new(),
            template_id: None,
        });
        self.nodes[parent.index()].children.push(id);
        id
    }
}

pub fn build_tree(catalog: &TemplateCatalog, triples: &[SemanticTriple]) -> Result<ExecTree, HierarchyError> {
    let mut by_id: BTreeMap<&TemplateId, &SemanticTriple> = BTreeMap::new();
    for t in triples {
        if !catalog.contains(&t.template_id) {
            return Err(HierarchyError::TripleForUnknownTemplate(t.template_id.clone()));
        }
        if by_id.insert(&t.template_id, t).is_some() {
            return Err(HierarchyError::DuplicateTriple(t.template_id.clone()));
        }
    }
    if let Some(missing) = catalog.ids().find(|id| !by_id.contains_key(id)) {
        return Err(HierarchyError::MissingTriple(missing.clone()));
    }

    let mut group_sizes: HashMap<(&str, &str, &str), usize> = HashMap::new();
    for t in by_id.values() {
        *group_sizes.entry(t.semantic_key()).or_default() += 1;
    }

    let mut tree = ExecTree {
        nodes: vec![TreeNode {
            id: NodeId::ROOT,
            level: NodeLevel::Root,
            label: ROOT_LABEL.to_string(),
            parent: None,
            children: Vec::new(),
            template_id: None,
        }],
        leaves: BTreeMap::new(),
    };
    let mut rank: HashMap<(&str, &str, &str), usize> = HashMap::new();
    // by_id iterates in natural template-id order, which fixes node numbering
    // and the #k suffixes.
    for t in by_id.values() {
        let key = t.semantic_key();
        let status = if group_sizes[&key] > 1 {
            let r = rank.entry(key).or_default();
            *r += 1;
            format!("{}#{}", t.status, r)
        } else {
            t.status.clone()
        };
        let entity = tree.add_child(NodeId::ROOT, NodeLevel::Entity, &t.entity);
        let action = tree.add_child(entity, NodeLevel::Action, &t.action);
        let leaf = tree.add_child(action, NodeLevel::Status, &status);
        tree.nodes[leaf.index()].template_id = Some(t.template_id.clone());
        tree.leaves.insert(t.template_id.clone(), leaf);
    }
    Ok(tree)
}

pub fn lookup_leaf(tree: &ExecTree, template_id: &TemplateId) -> Result<LeafPath, HierarchyError> {
    let status = tree.leaf(template_id).ok_or_else(|| HierarchyError::UnboundTemplate(template_id.clone()))?;
    let action = tree.nodes[status.index()].parent.expect("status has parent");
    let entity = tree.nodes[action.index()].parent.expect("action has parent");
    Ok(LeafPath { entity, action, status })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branching {
    pub max: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeStats {
    pub entity_count: usize,
    pub action_count: usize,
    pub status_count: usize,
    pub template_count: usize,
    /// Children per root (= entities).
    pub root_branching: Branching,
    /// Actions per entity.
    pub entity_branching: Branching,
    /// Statuses per action.
    pub action_branching: Branching,
}

pub fn tree_stats(tree: &ExecTree) -> TreeStats {
    let at = |level| tree.nodes.iter().filter(move |n| n.level == level);
    let branching = |level| {
        let counts: Vec<usize> = at(level).map(|n| n.children.len()).collect();
        let max = counts.iter().copied().max().unwrap_or(0);
        let mean = if counts.is_empty() { 0.0 } else { counts.iter().sum::<usize>() as f64 / counts.len() as f64 };
        Branching { max, mean }
    };
    TreeStats {
        entity_count: at(NodeLevel::Entity).count(),
        action_count: at(NodeLevel::Action).count(),
        status_count: at(NodeLevel::Status).count(),
        template_count: tree.template_count(),
        root_branching: branching(NodeLevel::Root),
        entity_branching: branching(NodeLevel::Entity),
        action_branching: branching(NodeLevel::Action),
    }
}

pub const TREE_FORMAT: &str = "loghier-tree";
pub const TREE_FORMAT_VERSION: u32 = 1;

/// Nested export of the tree, as served to the UI and written by `extract`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub format: String,
    pub version: u32,
    pub stats: TreeStats,
    pub root: NodeDocument,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDocument {
    pub id: NodeId,
    pub label: String,
    pub level: NodeLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<TemplateId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NodeDocument>,
}

impl TreeDocument {
    pub fn new(tree: &ExecTree, catalog: &TemplateCatalog) -> Self {
        fn node_doc(tree: &ExecTree, catalog: &TemplateCatalog, id: NodeId) -> NodeDocument {
            let n = &tree.nodes[id.index()];
            NodeDocument {
                id: n.id,
                label: n.label.clone(),
                level: n.level,
                template_id: n.template_id.clone(),
                template_text: n.template_id.as_ref().and_then(|t| catalog.text(t)).map(str::to_string),
                children: n.children.iter().map(|c| node_doc(tree, catalog, *c)).collect(),
            }
        }
        Self {
            format: TREE_FORMAT.to_string(),
            version: TREE_FORMAT_VERSION,
            stats: tree_stats(tree),
            root: node_doc(tree, catalog, NodeId::ROOT),
        }
    }
}
