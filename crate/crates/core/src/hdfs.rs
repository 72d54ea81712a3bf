//! HDFS data path: bundled templates and triples, a converter for the public
//! benchmark layout, and a seeded generator of HDFS-like block lifecycles.
//!
//! Converter input (loghub layout):
//!
//! * templates: `EventId,EventTemplate[,...]`
//! * traces: `BlockId,...` plus either `Features` (`[E5,E22,...]`) or
//!   `EventSequence` (`['E5', 'E22', ...]`); an optional `Label` column with
//!   `Success`/`Fail` is used when no label file is given
//! * labels: `BlockId,Label` with `Normal`/`Anomaly`
//!
//! Blocks are emitted in trace-file order. Blocks with an empty event list are
//! skipped; no windowing or deduplication is applied.

use std::collections::HashMap;
use std::io::Read;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{read_templates, CorpusError, LogSequence, SequenceCorpus, Split, TemplateCatalog, TemplateId};
use crate::llm::{FixtureError, FixtureLlm};
use crate::Label;

pub const TEMPLATES_CSV: &str = include_str!("../data/hdfs/templates.csv");
pub const TRIPLES_CSV: &str = include_str!("../data/hdfs/triples.csv");

pub fn bundled_catalog() -> TemplateCatalog {
    read_templates(TEMPLATES_CSV.as_bytes()).expect("bundled templates parse")
}

pub fn bundled_fixture() -> FixtureLlm {
    FixtureLlm::new().read_triples(TRIPLES_CSV.as_bytes()).expect("bundled triples parse")
}

#[derive(Debug, thiserror::Error)]
pub enum ConvertError {
    #[error("{file}: missing column {column}")]
    MissingColumn { file: &'static str, column: &'static str },
    #[error("{file} line {line}: {reason}")]
    Malformed { file: &'static str, line: u64, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn csv_err(file: &'static str) -> impl Fn(csv::Error) -> ConvertError {
    move |e| {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        match e.into_kind() {
            csv::ErrorKind::Io(io) => ConvertError::Io(io),
            kind => ConvertError::Malformed { file, line, reason: format!("{kind:?}") },
        }
    }
}

fn column(headers: &csv::StringRecord, file: &'static str, names: &[&'static str]) -> Result<usize, ConvertError> {
    names
        .iter()
        .find_map(|n| headers.iter().position(|h| h.trim() == *n))
        .ok_or(ConvertError::MissingColumn { file, column: names[0] })
}

pub fn read_loghub_templates<R: Read>(reader: R) -> Result<TemplateCatalog, ConvertError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(csv_err("templates"))?.clone();
    let id_col = column(&headers, "templates", &["EventId"])?;
    let text_col = column(&headers, "templates", &["EventTemplate"])?;
    let mut pairs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err("templates"))?;
        pairs.push((rec[id_col].trim().to_string(), rec[text_col].trim().to_string()));
    }
    if pairs.is_empty() {
        return Err(CorpusError::EmptyFile.into());
    }
    Ok(TemplateCatalog::from_pairs(pairs)?)
}

/// Parses `[E5,E22]`, `['E5', 'E22']` or `E5 E22`.
fn parse_event_list(raw: &str) -> Vec<TemplateId> {
    raw.trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(|c: char| c == ',' || c.is_whitespace())
        .map(|t| t.trim_matches(|c| c == '\'' || c == '"'))
        .filter(|t| !t.is_empty())
        .map(TemplateId::from)
        .collect()
}

pub fn read_anomaly_labels<R: Read>(reader: R) -> Result<HashMap<String, Label>, ConvertError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(csv_err("labels"))?.clone();
    let id_col = column(&headers, "labels", &["BlockId"])?;
    let label_col = column(&headers, "labels", &["Label"])?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err("labels"))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let label = rec[label_col].parse::<Label>().map_err(|reason| ConvertError::Malformed {
            file: "labels",
            line,
            reason,
        })?;
        out.insert(rec[id_col].trim().to_string(), label);
    }
    Ok(out)
}

pub fn read_traces<R: Read>(
    reader: R,
    catalog: &TemplateCatalog,
    labels: Option<&HashMap<String, Label>>,
) -> Result<Vec<LogSequence>, ConvertError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(csv_err("traces"))?.clone();
    let id_col = column(&headers, "traces", &["BlockId"])?;
    let events_col = column(&headers, "traces", &["Features", "EventSequence"])?;
    let label_col = headers.iter().position(|h| h.trim() == "Label");
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err("traces"))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let block = rec[id_col].trim().to_string();
        let events = parse_event_list(&rec[events_col]);
        if events.is_empty() {
            continue;
        }
        let label = match labels {
            Some(map) => map.get(&block).copied(),
            None => match label_col.map(|c| rec[c].trim()) {
                Some("Success") | Some("Normal") => Some(Label::Normal),
                Some("Fail") | Some("Anomaly") => Some(Label::Anomaly),
                Some("") | None => None,
                Some(other) => {
                    return Err(ConvertError::Malformed {
                        file: "traces",
                        line,
                        reason: format!("unknown label {other:?}"),
                    })
                }
            },
        };
        if let Some(missing) = events.iter().find(|e| !catalog.contains(e)) {
            return Err(CorpusError::UnknownTemplateId { seq_id: block, template_id: missing.clone() }.into());
        }
        out.push(LogSequence { sequence_id: block, events, label });
    }
    Ok(out)
}

/// Splits labeled sequences: the first `train_normals` normal sequences go to
/// training, everything else to test.
pub fn split_train_test(
    sequences: Vec<LogSequence>,
    train_normals: usize,
    catalog: &TemplateCatalog,
) -> Result<(SequenceCorpus, SequenceCorpus), CorpusError> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in sequences {
        if train.len() < train_normals && s.label == Some(Label::Normal) {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok((SequenceCorpus::new(Split::Train, train, catalog)?, SequenceCorpus::new(Split::Test, test, catalog)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub train: usize,
    pub test: usize,
    /// Probability that a test block is anomalous.
    pub anomaly_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { train: 2_000, test: 10_000, anomaly_rate: 0.03, seed: 7 }
    }
}

fn ids(xs: &[&str]) -> Vec<TemplateId> {
    xs.iter().map(|x| TemplateId::from(*x)).collect()
}

/// Randomly merges per-actor event queues, keeping each queue's own order.
fn interleave(rng: &mut ChaCha8Rng, mut queues: Vec<Vec<TemplateId>>) -> Vec<TemplateId> {
    queues.iter_mut().for_each(|q| q.reverse());
    let mut out = Vec::with_capacity(queues.iter().map(Vec::len).sum());
    loop {
        queues.retain(|q| !q.is_empty());
        if queues.is_empty() {
            return out;
        }
        let i = rng.random_range(0..queues.len());
        out.push(queues[i].pop().expect("non-empty"));
    }
}

/// One normal block: allocation, pipelined receive with per-replica acks and
/// block-map updates, then optional serving, verification, re-replication
/// and deletion. Concurrent actors are interleaved at random.
fn normal_block(rng: &mut ChaCha8Rng) -> Vec<TemplateId> {
    let replicas = match rng.random_range(0..20) {
        0 => 1,
        1..=3 => 2,
        _ => 3,
    };
    let mut receivers: Vec<Vec<TemplateId>> = (0..replicas).map(|_| ids(&["E5"])).collect();
    receivers.push(ids(&["E22"]));
    let mut ev = interleave(rng, receivers);

    let acks = (0..replicas)
        .map(|_| if rng.random_bool(0.5) { ids(&["E9", "E11", "E26"]) } else { ids(&["E11", "E9", "E26"]) })
        .collect();
    ev.extend(interleave(rng, acks));

    let mut tail = Vec::new();
    if rng.random_bool(0.6) {
        let mut reads = ids(&vec!["E3"; rng.random_range(1..=6)]);
        if rng.random_bool(0.3) {
            let at = rng.random_range(0..=reads.len());
            reads.insert(at, "E2".into());
        }
        tail.push(reads);
    } else if rng.random_bool(0.2) {
        tail.push(ids(&["E2"]));
    }
    if rng.random_bool(0.05) {
        tail.push(ids(&["E25", "E18", "E16"]));
        tail.push(ids(&["E5", "E6", "E26"]));
    }
    ev.extend(interleave(rng, tail));

    if rng.random_bool(0.3) {
        let deletes = (0..replicas).map(|_| ids(&["E23", "E21"])).collect();
        ev.extend(interleave(rng, deletes));
    }
    ev
}

fn anomalous_block(rng: &mut ChaCha8Rng) -> Vec<TemplateId> {
    let mut ev = normal_block(rng);
    let pos = |ev: &[TemplateId], id: &str| ev.iter().position(|e| e.as_str() == id);
    match rng.random_range(0..6) {
        0 => {
            let i = pos(&ev, "E9").expect("receive phase");
            ev.splice(i..=i, ids(&["E14", "E10"]));
        }
        1 => {
            let i = pos(&ev, "E22").expect("allocation");
            ev.insert(i + 1, "E7".into());
        }
        2 => {
            ev.retain(|e| e.as_str() != "E26");
            ev.extend(ids(&["E25", "E18", "E17"]));
        }
        3 => {
            let i = pos(&ev, "E26").expect("block map phase");
            ev.insert(i, "E4".into());
            ev.insert(i, "E3".into());
        }
        4 => ev.extend(ids(&["E23", "E21", "E20"])),
        _ => {
            let i = pos(&ev, "E11").expect("responder phase");
            ev.splice(i..=i, ids(&["E8", "E12"]));
        }
    }
    ev
}

/// Generates a normal-only training corpus and a labeled test corpus over the
/// bundled catalog.
pub fn synthesize(config: &SynthConfig) -> (SequenceCorpus, SequenceCorpus) {
    let catalog = bundled_catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let train = (0..config.train)
        .map(|i| LogSequence {
            sequence_id: format!("blk_train_{i}"),
            events: normal_block(&mut rng),
            label: Some(Label::Normal),
        })
        .collect();
    let mut test: Vec<LogSequence> = (0..config.test)
        .map(|i| {
            let anomalous = rng.random_bool(config.anomaly_rate);
            let events = if anomalous { anomalous_block(&mut rng) } else { normal_block(&mut rng) };
            let label = if anomalous { Label::Anomaly } else { Label::Normal };
            LogSequence { sequence_id: format!("blk_test_{i}"), events, label: Some(label) }
        })
        .collect();
    test.shuffle(&mut rng);
    (
        SequenceCorpus::new(Split::Train, train, &catalog).expect("synthetic train corpus is valid"),
        SequenceCorpus::new(Split::Test, test, &catalog).expect("synthetic test corpus is valid"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{build_tree, extract_catalog, lookup_leaf, tree_stats};
    use crate::llm::{LlmClient, NoLlm};

    #[test]
    fn bundled_data_builds_a_tree() {
        let catalog = bundled_catalog();
        // Independent count: data rows in the bundled file.
        let rows = TEMPLATES_CSV.lines().skip(1).filter(|l| !l.trim().is_empty()).count();
        assert_eq!(catalog.len(), rows);
        assert_eq!(rows, 29);
        let fixture = bundled_fixture();
        let no_llm = NoLlm::default();
        let triples: Vec<_> =
            extract_catalog(&catalog, Some(&fixture), &no_llm, 4).unwrap().into_iter().map(|e| e.triple).collect();
        assert_eq!(no_llm.counts().extract, 0);
        let tree = build_tree(&catalog, &triples).unwrap();
        let stats = tree_stats(&tree);
        assert_eq!(stats.status_count, 29);
        let e7 = lookup_leaf(&tree, &"E7".into()).unwrap();
        assert_eq!(
            (tree.label(e7.entity), tree.label(e7.action), tree.label(e7.status)),
            ("block", "write", "exception")
        );
        // E6 and E9 share (block, receive, received).
        assert_eq!(tree.label(lookup_leaf(&tree, &"E6".into()).unwrap().status), "received#1");
        assert_eq!(tree.label(lookup_leaf(&tree, &"E9".into()).unwrap().status), "received#2");
    }

    const LOGHUB_TEMPLATES: &str = "EventId,EventTemplate,Occurrences\nE5,[*]Receiving block[*]src:[*]dest:[*],10\nE22,\"[*]BLOCK* NameSystem[*]allocateBlock:[*]\",5\nE11,[*]PacketResponder[*]for block[*]terminating[*],3\n";

    #[test]
    fn converter_reads_loghub_layout() {
        let catalog = read_loghub_templates(LOGHUB_TEMPLATES.as_bytes()).unwrap();
        assert_eq!(catalog.len(), 3);
        let traces = "BlockId,Label,Type,Features,TimeInterval,Latency\nblk_1,Success,,\"[E5,E22,E5]\",\"[0.0]\",1\nblk_2,Fail,,\"[E5,E11]\",\"[0.0]\",1\nblk_3,Success,,[],[],0\n";
        let labels = read_anomaly_labels("BlockId,Label\nblk_1,Normal\nblk_2,Anomaly\n".as_bytes()).unwrap();
        let seqs = read_traces(traces.as_bytes(), &catalog, Some(&labels)).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].events, ids(&["E5", "E22", "E5"]));
        assert_eq!(seqs[1].label, Some(Label::Anomaly));
        let from_column = read_traces(traces.as_bytes(), &catalog, None).unwrap();
        assert_eq!(
            from_column.iter().map(|s| s.label).collect::<Vec<_>>(),
            seqs.iter().map(|s| s.label).collect::<Vec<_>>()
        );

        let alt = "BlockId,EventSequence\nblk_9,\"['E5', 'E11']\"\n";
        let seqs = read_traces(alt.as_bytes(), &catalog, None).unwrap();
        assert_eq!(seqs[0].events, ids(&["E5", "E11"]));
        assert_eq!(seqs[0].label, None);

        let bad = "BlockId,Features\nblk_1,\"[E5,E99]\"\n";
        assert!(matches!(
            read_traces(bad.as_bytes(), &catalog, None),
            Err(ConvertError::Corpus(CorpusError::UnknownTemplateId { .. }))
        ));
        assert!(matches!(
            read_traces("Id,Features\n".as_bytes(), &catalog, None),
            Err(ConvertError::MissingColumn { .. })
        ));
    }

    #[test]
    fn split_keeps_train_normal() {
        let catalog = read_loghub_templates(LOGHUB_TEMPLATES.as_bytes()).unwrap();
        let seqs = vec![
            LogSequence::new("a", ["E5"], Some(Label::Anomaly)),
            LogSequence::new("b", ["E5"], Some(Label::Normal)),
            LogSequence::new("c", ["E22"], Some(Label::Normal)),
        ];
        let (train, test) = split_train_test(seqs, 1, &catalog).unwrap();
        assert_eq!(train.sequences.iter().map(|s| s.sequence_id.as_str()).collect::<Vec<_>>(), ["b"]);
        assert_eq!(test.len(), 2);
    }

    #[test]
    fn synthetic_corpus_is_seeded_and_valid() {
        let cfg = SynthConfig { train: 50, test: 200, anomaly_rate: 0.2, seed: 3 };
        let (train, test) = synthesize(&cfg);
        assert_eq!((train.len(), test.len()), (50, 200));
        assert_eq!(synthesize(&cfg).1, test);
        let anomalies = test.sequences.iter().filter(|s| s.label == Some(Label::Anomaly)).count();
        assert!(anomalies > 10 && anomalies < 80, "{anomalies}");
    }
}
