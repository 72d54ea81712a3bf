//! Knowledge base of execution units.
//!
//! Entries are keyed by [`ScopeKey`] (level, parent label path, node labels)
//! and carry a label, explanation, provenance and observation count. Label
//! authority is `HumanOverride > LlmVerdict > TrainingPattern`, except that an
//! LLM may never flip a training-derived normal to an anomaly: such verdicts
//! are rejected with [`KbError::ConflictingVerdict`].
//!
//! ## Store file
//!
//! UTF-8, one JSON object per line. The first line is a header:
//!
//! ```text
//! {"format":"loghier-kb","version":1}
//! {"key":{"level":"S","parent_path":["root","session","open"],"node_labels":["started"]},"label":"Normal",...}
//! ```
//!
//! Every later line is a full [`KnowledgeEntry`]. When a store is attached to
//! a file, each mutation appends the updated entry; on load the last record
//! for a key wins. [`KnowledgeBase::compact`] rewrites the file with one
//! record per key.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, SequenceCorpus};
use crate::decompose::{decompose, DecomposeError};
use crate::hierarchy::{ExecTree, NodeId};
use crate::{Label, Level};

pub const STORE_FORMAT: &str = "loghier-kb";
pub const STORE_VERSION: u32 = 1;
/// Upper bound on `source_sequence_ids` kept per entry.
pub const SOURCE_SAMPLE_LIMIT: usize = 8;

/// Identity of an execution unit within its semantic scope.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScopeKey {
    pub level: Level,
    pub parent_path: Vec<String>,
    pub node_labels: Vec<String>,
}

impl ScopeKey {
    pub fn new<P, N>(level: Level, parent_path: P, node_labels: N) -> Self
    where
        P: IntoIterator,
        P::Item: Into<String>,
        N: IntoIterator,
        N::Item: Into<String>,
    {
        Self {
            level,
            parent_path: parent_path.into_iter().map(Into::into).collect(),
            node_labels: node_labels.into_iter().map(Into::into).collect(),
        }
    }

    /// `LEVEL|root/parent/path|node,node,...`
    pub fn canonical(&self) -> String {
        format!("{}|{}|{}", self.level, self.parent_path.join("/"), self.node_labels.join(","))
    }

    pub fn rendered(&self) -> String {
        crate::decompose::render(self.parent_path.last().map(String::as_str).unwrap_or(""), &self.node_labels)
    }

    /// True when this key sits at or below the node with label path `path`.
    pub fn under(&self, path: &[String]) -> bool {
        self.parent_path.starts_with(path)
    }
}

impl fmt::Display for ScopeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl FromStr for ScopeKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.splitn(3, '|');
        let (Some(level), Some(parent), Some(nodes)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format!("scope key {s:?} is not LEVEL|parent/path|nodes"));
        };
        let level: Level = level.parse()?;
        let parent_path: Vec<String> = parent.split('/').map(str::to_string).collect();
        let node_labels: Vec<String> = nodes.split(',').map(str::to_string).collect();
        if parent_path.iter().chain(&node_labels).any(|l| l.is_empty() || l.contains('|')) {
            return Err(format!("scope key {s:?} has an empty or invalid label"));
        }
        Ok(Self { level, parent_path, node_labels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    TrainingPattern,
    LlmVerdict,
    HumanOverride,
}

impl Provenance {
    fn authority(self) -> u8 {
        match self {
            Provenance::TrainingPattern => 0,
            Provenance::LlmVerdict => 1,
            Provenance::HumanOverride => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub key: ScopeKey,
    pub label: Label,
    pub explanation: String,
    pub provenance: Provenance,
    pub frequency: u64,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub source_sequence_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub override_note: Option<String>,
}

impl KnowledgeEntry {
    fn observe(&mut self, source: Option<&str>, now: u64) {
        self.frequency += 1;
        self.updated_ms = now;
        if let Some(src) = source {
            if self.source_sequence_ids.len() < SOURCE_SAMPLE_LIMIT
                && !self.source_sequence_ids.iter().any(|s| s == src)
            {
                self.source_sequence_ids.push(src.to_string());
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("LLM verdict Anomaly conflicts with training pattern {0}")]
    ConflictingVerdict(ScopeKey),
    #[error("training patterns must be Normal: {0}")]
    AnomalousTrainingPattern(ScopeKey),
    #[error("no entry for key {0}")]
    UnknownKey(String),
    #[error("no tree node {0}")]
    UnknownNode(u32),
    #[error("corrupt store at line {line}: {reason}")]
    CorruptStore { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
}

impl KbError {
    pub fn code(&self) -> &'static str {
        match self {
            KbError::ConflictingVerdict(_) => "ConflictingVerdict",
            KbError::AnomalousTrainingPattern(_) => "AnomalousTrainingPattern",
            KbError::UnknownKey(_) => "UnknownKey",
            KbError::UnknownNode(_) => "UnknownNode",
            KbError::CorruptStore { .. } => "CorruptStore",
            KbError::Io(_) => "IoError",
            KbError::Corpus(e) => e.code(),
            KbError::Decompose(e) => e.code(),
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Debug)]
struct Journal {
    path: PathBuf,
    writer: BufWriter<File>,
    records: usize,
}

#[derive(Debug, Default)]
pub struct KnowledgeBase {
    entries: BTreeMap<ScopeKey, KnowledgeEntry>,
    journal: Option<Journal>,
}

impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Clone for KnowledgeBase {
    /// Clones the entries only; the copy is not attached to a file.
    fn clone(&self) -> Self {
        Self { entries: self.entries.clone(), journal: None }
    }
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn query(&self, key: &ScopeKey) -> Option<&KnowledgeEntry> {
        self.entries.get(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = &KnowledgeEntry> {
        self.entries.values()
    }

    /// Entries of one `(level, parent_path)` scope, in key order.
    pub fn scope<'a>(&'a self, level: Level, parent_path: &'a [String]) -> impl Iterator<Item = &'a KnowledgeEntry> {
        let start = ScopeKey { level, parent_path: parent_path.to_vec(), node_labels: Vec::new() };
        self.entries
            .range(start..)
            .take_while(move |(k, _)| k.level == level && k.parent_path == parent_path)
            .map(|(_, v)| v)
    }

    /// Filtered listing, most frequent first, ties by canonical key.
    pub fn list(&self, parent_path: Option<&[String]>, level: Option<Level>) -> Vec<&KnowledgeEntry> {
        let mut out: Vec<&KnowledgeEntry> = self
            .entries
            .values()
            .filter(|e| level.is_none_or(|l| e.key.level == l))
            .filter(|e| parent_path.is_none_or(|p| e.key.under(p)))
            .collect();
        out.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.key.canonical().cmp(&b.key.canonical())));
        out
    }

    /// Creates or updates the entry for `key` under the precedence rules.
    pub fn upsert(
        &mut self,
        key: ScopeKey,
        label: Label,
        explanation: &str,
        provenance: Provenance,
        source_sequence_id: Option<&str>,
    ) -> Result<KnowledgeEntry, KbError> {
        if provenance == Provenance::TrainingPattern && label != Label::Normal {
            return Err(KbError::AnomalousTrainingPattern(key));
        }
        let now = now_ms();
        let entry = match self.entries.get_mut(&key) {
            None => {
                let mut e = KnowledgeEntry {
                    key: key.clone(),
                    label,
                    explanation: explanation.to_string(),
                    provenance,
                    frequency: 0,
                    created_ms: now,
                    updated_ms: now,
                    source_sequence_ids: Vec::new(),
                    override_note: None,
                };
                e.observe(source_sequence_id, now);
                self.entries.insert(key.clone(), e);
                &self.entries[&key]
            }
            Some(existing) => {
                if existing.provenance == Provenance::TrainingPattern
                    && provenance == Provenance::LlmVerdict
                    && label == Label::Anomaly
                {
                    log::warn!("rejecting LLM anomaly verdict for training pattern {key}");
                    return Err(KbError::ConflictingVerdict(key));
                }
                if provenance.authority() >= existing.provenance.authority()
                    && provenance != Provenance::TrainingPattern
                {
                    existing.label = label;
                    existing.explanation = explanation.to_string();
                    existing.provenance = provenance;
                }
                existing.observe(source_sequence_id, now);
                &*existing
            }
        };
        let entry = entry.clone();
        self.journal_append(&entry)?;
        Ok(entry)
    }

    /// Human correction: sets the label and marks the entry as overridden.
    pub fn override_label(&mut self, key: &ScopeKey, label: Label, note: &str) -> Result<KnowledgeEntry, KbError> {
        let entry = self.entries.get_mut(key).ok_or_else(|| KbError::UnknownKey(key.canonical()))?;
        entry.label = label;
        entry.provenance = Provenance::HumanOverride;
        entry.override_note = Some(note.to_string());
        entry.updated_ms = now_ms();
        let entry = entry.clone();
        self.journal_append(&entry)?;
        Ok(entry)
    }

    /// Writes a compacted snapshot to `path` (header plus one line per entry).
    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), KbError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_snapshot(&mut w)?;
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<(), KbError> {
        let header = Header { format: STORE_FORMAT.into(), version: STORE_VERSION };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for e in self.entries.values() {
            writeln!(w, "{}", serde_json::to_string(e).expect("entry serializes"))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KbError> {
        Ok(Self::replay(path.as_ref())?.0)
    }

    fn replay(path: &Path) -> Result<(Self, usize), KbError> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = BTreeMap::new();
        let mut records = 0;
        let mut saw_header = false;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if !saw_header {
                let header: Header = serde_json::from_str(&line)
                    .map_err(|e| KbError::CorruptStore { line: line_no, reason: format!("bad header: {e}") })?;
                if header.format != STORE_FORMAT || header.version != STORE_VERSION {
                    return Err(KbError::CorruptStore {
                        line: line_no,
                        reason: format!("unsupported store {} v{}", header.format, header.version),
                    });
                }
                saw_header = true;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let entry: KnowledgeEntry = serde_json::from_str(&line)
                .map_err(|e| KbError::CorruptStore { line: line_no, reason: e.to_string() })?;
            records += 1;
            entries.insert(entry.key.clone(), entry);
        }
        if !saw_header {
            return Err(KbError::CorruptStore { line: 1, reason: "missing header".into() });
        }
        Ok((Self { entries, journal: None }, records))
    }

    /// Opens (or creates) a store file and appends every later mutation to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, KbError> {
        let path = path.as_ref();
        let (mut kb, records) = if path.exists() { Self::replay(path)? } else { (Self::new(), 0) };
        if !path.exists() {
            kb.persist(path)?;
        }
        let file = OpenOptions::new().append(true).open(path)?;
        kb.journal = Some(Journal { path: path.to_path_buf(), writer: BufWriter::new(file), records });
        Ok(kb)
    }

    /// Attaches an in-memory store to `path`, writing a snapshot first.
    pub fn attach(&mut self, path: impl AsRef<Path>) -> Result<(), KbError> {
        let path = path.as_ref();
        self.persist(path)?;
        let file = OpenOptions::new().append(true).open(path)?;
        self.journal =
            Some(Journal { path: path.to_path_buf(), writer: BufWriter::new(file), records: self.entries.len() });
        Ok(())
    }

    pub fn attached_path(&self) -> Option<&Path> {
        self.journal.as_ref().map(|j| j.path.as_path())
    }

    /// Rewrites the attached file with one record per key.
    pub fn compact(&mut self) -> Result<(), KbError> {
        let Some(path) = self.journal.as_ref().map(|j| j.path.clone()) else { return Ok(()) };
        self.journal = None;
        self.attach(path)
    }

    fn journal_append(&mut self, entry: &KnowledgeEntry) -> Result<(), KbError> {
        let Some(journal) = self.journal.as_mut() else { return Ok(()) };
        writeln!(journal.writer, "{}", serde_json::to_string(entry).expect("entry serializes"))?;
        journal.writer.flush()?;
        journal.records += 1;
        if journal.records > 4 * self.entries.len() + 1024 {
            self.compact()?;
        }
        Ok(())
    }
}

/// Knowledge base behind a readers/single-writer lock.
#[derive(Debug, Default)]
pub struct SharedKb(RwLock<KnowledgeBase>);

impl SharedKb {
    pub fn new(kb: KnowledgeBase) -> Self {
        Self(RwLock::new(kb))
    }

    pub fn read(&self) -> RwLockReadGuard<'_, KnowledgeBase> {
        self.0.read()
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, KnowledgeBase> {
        self.0.write()
    }

    pub fn into_inner(self) -> KnowledgeBase {
        self.0.into_inner()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub sequences: usize,
    pub new_entries: usize,
    pub total_observations: usize,
}

pub fn ingest_training(
    corpus: &SequenceCorpus,
    tree: &ExecTree,
    kb: &mut KnowledgeBase,
) -> Result<IngestReport, KbError> {
    ingest_training_with_progress(corpus, tree, kb, &|_, _| {})
}

/// Stores every unit of every training sequence as a normal pattern.
/// `progress(done, total)` is called after each sequence.
pub fn ingest_training_with_progress(
    corpus: &SequenceCorpus,
    tree: &ExecTree,
    kb: &mut KnowledgeBase,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<IngestReport, KbError> {
    if let Some(bad) = corpus.sequences.iter().find(|s| s.label == Some(Label::Anomaly)) {
        return Err(CorpusError::LabeledTrainAnomaly(bad.sequence_id.clone()).into());
    }
    let sets = corpus.sequences.par_iter().map(|s| decompose(s, tree)).collect::<Result<Vec<_>, _>>()?;
    let before = kb.len();
    let mut report = IngestReport { sequences: corpus.len(), ..Default::default() };
    for (i, set) in sets.iter().enumerate() {
        for unit in set.iter() {
            kb.upsert(unit.key(), Label::Normal, "", Provenance::TrainingPattern, Some(&set.sequence_id))?;
            report.total_observations += 1;
        }
        progress(i + 1, sets.len());
    }
    report.new_entries = kb.len() - before;
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCounts {
    #[serde(rename = "S")]
    pub status: usize,
    #[serde(rename = "A")]
    pub action: usize,
    #[serde(rename = "E")]
    pub entity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: NodeId,
    pub label_path: Vec<String>,
    pub entries: usize,
    pub per_level: LevelCounts,
    pub normal: usize,
    pub anomaly: usize,
    pub human_overrides: usize,
    pub total_frequency: u64,
}

/// Aggregates entries whose parent path passes through `node`.
pub fn node_summary(kb: &KnowledgeBase, tree: &ExecTree, node: NodeId) -> Result<NodeSummary, KbError> {
    tree.node(node).ok_or(KbError::UnknownNode(node.0))?;
    let label_path = tree.label_path(node);
    let mut s = NodeSummary {
        node,
        label_path,
        entries: 0,
        per_level: LevelCounts::default(),
        normal: 0,
        anomaly: 0,
        human_overrides: 0,
        total_frequency: 0,
    };
    for e in kb.entries().filter(|e| e.key.under(&s.label_path)) {
        s.entries += 1;
        match e.key.level {
            Level::Status => s.per_level.status += 1,
            Level::Action => s.per_level.action += 1,
            Level::Entity => s.per_level.entity += 1,
        }
        match e.label {
            Label::Normal => s.normal += 1,
            Label::Anomaly => s.anomaly += 1,
        }
        if e.provenance == Provenance::HumanOverride {
            s.human_overrides += 1;
        }
        s.total_frequency += e.frequency;
    }
    Ok(s)
}
