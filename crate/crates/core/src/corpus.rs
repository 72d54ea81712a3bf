//! Template catalogs and template-ID sequences.
//!
//! Both inputs are UTF-8 CSV with a header row:
//!
//! ```text
//! template_id,template_text
//! E1,Open session started
//! E2,"Served block, to peer"
//!
//! sequence_id,events,label
//! blk_1,E1 E2 E3,Normal
//! blk_2,E1 E3,
//! ```
//!
//! `events` is a space-separated list of template ids; an empty label means
//! the sequence is unlabeled.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Label;

/// Opaque template identifier such as `E5`.
///
/// Ordering is "natural": runs of ASCII digits compare numerically, so `E2 < E10`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateId(pub String);

impl TemplateId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TemplateId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl From<String> for TemplateId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl Ord for TemplateId {
    fn cmp(&self, other: &Self) -> Ordering {
        natural_cmp(&self.0, &other.0)
    }
}

impl PartialOrd for TemplateId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut a, mut b) = (a.as_bytes(), b.as_bytes());
    loop {
        match (a.first(), b.first()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) if x.is_ascii_digit() && y.is_ascii_digit() => {
                let na = a.iter().take_while(|c| c.is_ascii_digit()).count();
                let nb = b.iter().take_while(|c| c.is_ascii_digit()).count();
                let (da, db) = (strip_zeros(&a[..na]), strip_zeros(&b[..nb]));
                let ord = da.len().cmp(&db.len()).then_with(|| da.cmp(db)).then(na.cmp(&nb));
                if ord != Ordering::Equal {
                    return ord;
                }
                a = &a[na..];
                b = &b[nb..];
            }
            (Some(x), Some(y)) => {
                if x != y {
                    return x.cmp(y);
                }
                a = &a[1..];
                b = &b[1..];
            }
        }
    }
}

fn strip_zeros(digits: &[u8]) -> &[u8] {
    let n = digits.iter().take_while(|&&c| c == b'0').count();
    &digits[n..]
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: u64, reason: String },
    #[error("duplicate template id {0}")]
    DuplicateTemplateId(TemplateId),
    #[error("file contains no records")]
    EmptyFile,
    #[error("sequence {seq_id} references unknown template {template_id}")]
    UnknownTemplateId { seq_id: String, template_id: TemplateId },
    #[error("training sequence {0} is labeled Anomaly")]
    LabeledTrainAnomaly(String),
    #[error("duplicate sequence id {0}")]
    DuplicateSequenceId(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CorpusError {
    pub fn code(&self) -> &'static str {
        match self {
            CorpusError::MalformedRecord { .. } => "MalformedRecord",
            CorpusError::DuplicateTemplateId(_) => "DuplicateTemplateId",
            CorpusError::EmptyFile => "EmptyFile",
            CorpusError::UnknownTemplateId { .. } => "UnknownTemplateId",
            CorpusError::LabeledTrainAnomaly(_) => "LabeledTrainAnomaly",
            CorpusError::DuplicateSequenceId(_) => "DuplicateSequenceId",
            CorpusError::Io(_) => "IoError",
        }
    }
}

fn csv_error(e: csv::Error) -> CorpusError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CorpusError::Io(io),
        kind => CorpusError::MalformedRecord { line, reason: format!("{kind:?}") },
    }
}

/// The immutable set of templates for one analysis session.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateCatalog {
    templates: BTreeMap<TemplateId, String>,
}

impl TemplateCatalog {
    /// Builds a catalog from `(id, text)` pairs, rejecting duplicate ids and empty texts.
    pub fn from_pairs<I, K, V>(pairs: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut templates = BTreeMap::new();
        for (i, (id, text)) in pairs.into_iter().enumerate() {
            let id = TemplateId(id.into().trim().to_string());
            let text: String = text.into();
            if id.0.is_empty() || text.trim().is_empty() {
                return Err(CorpusError::MalformedRecord {
                    line: i as u64 + 2,
                    reason: "empty template id or text".into(),
                });
            }
            if templates.insert(id.clone(), text).is_some() {
                return Err(CorpusError::DuplicateTemplateId(id));
            }
        }
        Ok(Self { templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn contains(&self, id: &TemplateId) -> bool {
        self.templates.contains_key(id)
    }

    pub fn text(&self, id: &TemplateId) -> Option<&str> {
        self.templates.get(id).map(String::as_str)
    }

    /// Templates in natural id order.
    pub fn iter(&self) -> impl Iterator<Item = (&TemplateId, &str)> {
        self.templates.iter().map(|(k, v)| (k, v.as_str()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &TemplateId> {
        self.templates.keys()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), CorpusError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["template_id", "template_text"]).map_err(csv_error)?;
        for (id, text) in &self.templates {
            wtr.write_record([id.as_str(), text.as_str()]).map_err(csv_error)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Parses a templates CSV from any reader.
pub fn read_templates<R: Read>(reader: R) -> Result<TemplateCatalog, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut templates = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 2 {
            return Err(CorpusError::MalformedRecord {
                line,
                reason: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let id = TemplateId(record[0].trim().to_string());
        let text = record[1].trim().to_string();
        if id.0.is_empty() || text.is_empty() {
            return Err(CorpusError::MalformedRecord { line, reason: "empty template id or text".into() });
        }
        if templates.insert(id.clone(), text).is_some() {
            return Err(CorpusError::DuplicateTemplateId(id));
        }
    }
    if templates.is_empty() {
        return Err(CorpusError::EmptyFile);
    }
    Ok(TemplateCatalog { templates })
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<TemplateCatalog, CorpusError> {
    read_templates(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(alias = "train")]
    Train,
    #[serde(alias = "test")]
    Test,
}

/// One grouped log sequence (for HDFS, one block).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogSequence {
    pub sequence_id: String,
    pub events: Vec<TemplateId>,
    pub label: Option<Label>,
}

impl LogSequence {
    pub fn new<S: Into<TemplateId>>(
        sequence_id: impl Into<String>,
        events: impl IntoIterator<Item = S>,
        label: Option<Label>,
    ) -> Self {
        Self { sequence_id: sequence_id.into(), events: events.into_iter().map(Into::into).collect(), label }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceCorpus {
    pub split: Split,
    pub sequences: Vec<LogSequence>,
}

impl SequenceCorpus {
    /// Builds a corpus, enforcing catalog membership and the normal-only training rule.
    pub fn new(split: Split, sequences: Vec<LogSequence>, catalog: &TemplateCatalog) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for seq in &sequences {
            if !seen.insert(seq.sequence_id.as_str()) {
                return Err(CorpusError::DuplicateSequenceId(seq.sequence_id.clone()));
            }
            check_sequence(seq, split, catalog)?;
        }
        Ok(Self { split, sequences })
    }

    pub fn empty(split: Split) -> Self {
        Self { split, sequences: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn get(&self, sequence_id: &str) -> Option<&LogSequence> {
        self.sequences.iter().find(|s| s.sequence_id == sequence_id)
    }

    pub fn total_events(&self) -> usize {
        self.sequences.iter().map(|s| s.events.len()).sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), CorpusError> {
        write_sequences(&self.sequences, w)
    }
}

fn check_sequence(seq: &LogSequence, split: Split, catalog: &TemplateCatalog) -> Result<(), CorpusError> {
    if let Some(missing) = seq.events.iter().find(|e| !catalog.contains(e)) {
        return Err(CorpusError::UnknownTemplateId { seq_id: seq.sequence_id.clone(), template_id: missing.clone() });
    }
    if split == Split::Train && seq.label == Some(Label::Anomaly) {
        return Err(CorpusError::LabeledTrainAnomaly(seq.sequence_id.clone()));
    }
    Ok(())
}

pub fn write_sequences<'a, W: Write>(
    sequences: impl IntoIterator<Item = &'a LogSequence>,
    w: W,
) -> Result<(), CorpusError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["sequence_id", "events", "label"]).map_err(csv_error)?;
    for seq in sequences {
        let events = seq.events.iter().map(TemplateId::as_str).collect::<Vec<_>>().join(" ");
        let label = seq.label.map(|l| l.as_str()).unwrap_or("");
        wtr.write_record([seq.sequence_id.as_str(), events.as_str(), label]).map_err(csv_error)?;
    }
    wtr.flush()?;
    Ok(())
}

fn parse_label(raw: &str, line: u64) -> Result<Option<Label>, CorpusError> {
    match raw.trim() {
        "" => Ok(None),
        "Normal" => Ok(Some(Label::Normal)),
        "Anomaly" => Ok(Some(Label::Anomaly)),
        other => Err(CorpusError::MalformedRecord { line, reason: format!("unknown label {other:?}") }),
    }
}

/// Parses a sequences CSV from any reader and validates it against `catalog`.
///
/// A header-only file yields an empty corpus.
pub fn read_sequences<R: Read>(
    reader: R,
    catalog: &TemplateCatalog,
    split: Split,
) -> Result<SequenceCorpus, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let mut sequences = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() < 2 || record.len() > 3 {
            return Err(CorpusError::MalformedRecord {
                line,
                reason: format!("expected 2 or 3 fields, found {}", record.len()),
            });
        }
        let sequence_id = record[0].trim().to_string();
        if sequence_id.is_empty() {
            return Err(CorpusError::MalformedRecord { line, reason: "empty sequence id".into() });
        }
        let events: Vec<TemplateId> = record[1].split_whitespace().map(TemplateId::from).collect();
        if events.is_empty() {
            return Err(CorpusError::MalformedRecord { line, reason: "sequence has no events".into() });
        }
        let label = parse_label(record.get(2).unwrap_or(""), line)?;
        sequences.push(LogSequence { sequence_id, events, label });
    }
    SequenceCorpus::new(split, sequences, catalog)
}

pub fn load_sequences(
    path: impl AsRef<Path>,
    catalog: &TemplateCatalog,
    split: Split,
) -> Result<SequenceCorpus, CorpusError> {
    read_sequences(std::fs::File::open(path)?, catalog, split)
}

/// Purely informational corpus summary.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub sequences: usize,
    pub events: usize,
    pub distinct_templates: usize,
    pub normal: usize,
    pub anomaly: usize,
    pub unlabeled: usize,
    /// Event ids absent from the catalog (only possible for hand-built corpora).
    pub unknown_templates: usize,
}

pub fn validate_corpus(corpus: &SequenceCorpus, catalog: &TemplateCatalog) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut distinct = BTreeSet::new();
    for seq in &corpus.sequences {
        report.sequences += 1;
        report.events += seq.events.len();
        for e in &seq.events {
            distinct.insert(e);
            if !catalog.contains(e) {
                report.unknown_templates += 1;
            }
        }
        match seq.label {
            Some(Label::Normal) => report.normal += 1,
            Some(Label::Anomaly) => report.anomaly += 1,
            None => report.unlabeled += 1,
        }
    }
    report.distinct_templates = distinct.len();
    report
}

/// Fallback raw-line parser for toy data: a line maps to a template only when
/// its trimmed text equals the template text exactly.
#[derive(Debug, Clone)]
pub struct ExactMatcher {
    by_text: HashMap<String, TemplateId>,
}

impl ExactMatcher {
    pub fn new(catalog: &TemplateCatalog) -> Self {
        let by_text = catalog.iter().map(|(id, text)| (text.trim().to_string(), id.clone())).collect();
        Self { by_text }
    }

    pub fn match_line(&self, line: &str) -> Option<&TemplateId> {
        self.by_text.get(line.trim())
    }
}
