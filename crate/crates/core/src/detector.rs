//! Modular detection over execution units.
//!
//! Each unit first goes through the pattern matcher (exact key lookup in the
//! knowledge base). Unknown units are sent to the LLM together with up to `k`
//! normal units from the same scope. Levels run bottom-up (S, then A, then E),
//! left to right within a level, and detection stops at the first anomaly.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{LogSequence, TemplateCatalog, TemplateId};
use crate::decompose::{decompose, segment_events, DecomposeError, ExecSeq, Span};
use crate::hierarchy::ExecTree;
use crate::kb::{KbError, KnowledgeBase, KnowledgeEntry, Provenance, ScopeKey, SharedKb};
use crate::llm::{parse_verdict, FixtureLlm, LiveLlm, LlmClient, LlmError, MockBehavior, MockLlm, VerifyRequest};
use crate::{Label, Level};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlmMode {
    Live,
    Fixture,
    AlwaysAnomaly,
    AlwaysNormal,
    /// Pattern matching only: unknown units are reported as anomalies without
    /// consulting any model.
    FlagUnknown,
}

impl std::str::FromStr for LlmMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(LlmMode::Live),
            "fixture" => Ok(LlmMode::Fixture),
            "always-anomaly" => Ok(LlmMode::AlwaysAnomaly),
            "always-normal" => Ok(LlmMode::AlwaysNormal),
            "flag-unknown" => Ok(LlmMode::FlagUnknown),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExampleSelection {
    #[default]
    FrequencyDesc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub k: usize,
    pub llm_mode: LlmMode,
    pub max_llm_calls_per_sequence: usize,
    pub example_selection: ExampleSelection,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            k: 5,
            llm_mode: LlmMode::FlagUnknown,
            max_llm_calls_per_sequence: 10,
            example_selection: ExampleSelection::FrequencyDesc,
        }
    }
}

impl DetectorConfig {
    pub fn with_mode(llm_mode: LlmMode) -> Self {
        Self { llm_mode, ..Self::default() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("LLM call budget of {0} per sequence exceeded")]
    LlmCallBudgetExceeded(usize),
    #[error("unparseable verdict after retry: {0:?}")]
    VerdictUnparseable(String),
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kb(#[from] KbError),
}

impl DetectError {
    pub fn code(&self) -> &'static str {
        match self {
            DetectError::Decompose(e) => e.code(),
            DetectError::Llm(_) => "LlmUnavailable",
            DetectError::LlmCallBudgetExceeded(_) => "LlmCallBudgetExceeded",
            DetectError::VerdictUnparseable(_) => "VerdictUnparseable",
            DetectError::InvalidConfig(_) => "InvalidConfig",
            DetectError::Kb(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    PatternMatch,
    KnowledgeReuse,
    Llm,
    HumanOverrideReuse,
    FlagUnknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqVerdict {
    pub level: Level,
    pub key: ScopeKey,
    pub rendered: String,
    pub span: Span,
    pub label: Label,
    pub method: Method,
    pub explanation: String,
    pub llm_called: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchResult {
    Known(SeqVerdict),
    Unknown,
}

fn verdict_from_entry(seq: &ExecSeq, entry: &KnowledgeEntry) -> SeqVerdict {
    let (method, explanation) = match entry.provenance {
        Provenance::TrainingPattern => (Method::PatternMatch, "matches a normal training pattern".to_string()),
        Provenance::LlmVerdict => (Method::KnowledgeReuse, entry.explanation.clone()),
        Provenance::HumanOverride => {
            let note = entry.override_note.as_deref().unwrap_or("");
            let text = if note.is_empty() { entry.explanation.clone() } else { format!("human override: {note}") };
            (Method::HumanOverrideReuse, text)
        }
    };
    SeqVerdict {
        level: seq.level,
        key: entry.key.clone(),
        rendered: seq.rendered(),
        span: seq.span,
        label: entry.label,
        method,
        explanation,
        llm_called: false,
    }
}

/// Exact-key lookup. A training pattern is always normal, so a
/// `PatternMatch` verdict is always `Normal`.
pub fn pattern_match(seq: &ExecSeq, kb: &KnowledgeBase) -> MatchResult {
    match kb.query(&seq.key()) {
        Some(entry) => MatchResult::Known(verdict_from_entry(seq, entry)),
        None => MatchResult::Unknown,
    }
}

/// Up to `k` rendered normal units from the same scope, most frequent first,
/// ties broken by canonical key.
pub fn select_examples(kb: &KnowledgeBase, parent_path: &[String], level: Level, k: usize) -> Vec<String> {
    let mut normals: Vec<&KnowledgeEntry> = kb.scope(level, parent_path).filter(|e| e.label == Label::Normal).collect();
    normals.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.key.canonical().cmp(&b.key.canonical())));
    normals.into_iter().take(k).map(|e| e.key.rendered()).collect()
}

pub fn scope_description(seq: &ExecSeq) -> String {
    let path = seq.parent_path.join(" / ");
    match seq.level {
        Level::Status => format!("status transitions of action '{}' ({path})", seq.parent_label()),
        Level::Action => format!("action transitions of entity '{}' ({path})", seq.parent_label()),
        Level::Entity => "entity transitions across the whole log sequence".to_string(),
    }
}

/// Per-sequence LLM call accounting.
#[derive(Debug, Clone, Copy)]
pub struct CallBudget {
    pub cap: usize,
    pub used: usize,
}

impl CallBudget {
    pub fn new(cap: usize) -> Self {
        Self { cap, used: 0 }
    }

    fn take(&mut self) -> Result<(), DetectError> {
        if self.used >= self.cap {
            return Err(DetectError::LlmCallBudgetExceeded(self.cap));
        }
        self.used += 1;
        Ok(())
    }
}

/// Asks the LLM about one unknown unit and records the answer in `kb`.
/// An unparseable answer is retried once.
pub fn llm_verify(
    seq: &ExecSeq,
    examples: Vec<String>,
    segment_templates: Vec<String>,
    llm: &dyn LlmClient,
    kb: &SharedKb,
    budget: &mut CallBudget,
    warnings: &mut Vec<String>,
) -> Result<SeqVerdict, DetectError> {
    let request = VerifyRequest {
        key: seq.key(),
        scope_description: scope_description(seq),
        rendered: seq.rendered(),
        examples,
        segment_templates,
    };
    let mut parsed = None;
    let mut raw = String::new();
    for _ in 0..2 {
        budget.take()?;
        raw = llm.verify(&request)?;
        if let Some(v) = parse_verdict(&raw) {
            parsed = Some(v);
            break;
        }
        log::warn!("unparseable verdict for {}: {raw:?}", request.key);
    }
    let (label, explanation) = parsed.ok_or(DetectError::VerdictUnparseable(raw))?;
    match kb.write().upsert(
        request.key.clone(),
        label,
        &explanation,
        Provenance::LlmVerdict,
        Some(&seq.source_sequence_id),
    ) {
        Ok(_) => {}
        Err(KbError::ConflictingVerdict(key)) => {
            warnings.push(format!("LLM verdict {label} for {key} conflicts with a training pattern; not stored"));
        }
        Err(e) => return Err(e.into()),
    }
    Ok(SeqVerdict {
        level: seq.level,
        key: request.key,
        rendered: request.rendered,
        span: seq.span,
        label,
        method: Method::Llm,
        explanation,
        llm_called: true,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalousSegment {
    pub level: Level,
    pub key: ScopeKey,
    pub rendered: String,
    pub span: Span,
    pub events: Vec<TemplateId>,
}

/// Per-sequence outcome. Trace items are ordered S, then A, then E.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub sequence_id: String,
    pub final_label: Label,
    pub anomalous_segment: Option<AnomalousSegment>,
    pub explanation: String,
    pub trace: Vec<SeqVerdict>,
    pub llm_call_count: usize,
    pub levels_completed: Vec<Level>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub const NORMAL_EXPLANATION: &str = "every execution unit matched normal knowledge";
pub const FLAG_UNKNOWN_EXPLANATION: &str = "no matching knowledge for this execution unit";

/// Shared detection context: one tree, one knowledge base, one client.
pub struct Detector<'a> {
    pub tree: &'a ExecTree,
    pub catalog: Option<&'a TemplateCatalog>,
    pub kb: &'a SharedKb,
    pub llm: &'a dyn LlmClient,
    pub config: DetectorConfig,
}

impl<'a> Detector<'a> {
    pub fn new(tree: &'a ExecTree, kb: &'a SharedKb, llm: &'a dyn LlmClient, config: DetectorConfig) -> Self {
        Self { tree, catalog: None, kb, llm, config }
    }

    /// Template texts are added to LLM prompts when a catalog is present.
    pub fn with_catalog(mut self, catalog: &'a TemplateCatalog) -> Self {
        self.catalog = Some(catalog);
        self
    }

    pub fn detect(&self, sequence: &LogSequence) -> Result<DetectionReport, DetectError> {
        if self.config.k == 0 {
            return Err(DetectError::InvalidConfig("k must be at least 1".into()));
        }
        let set = decompose(sequence, self.tree)?;
        let mut budget = CallBudget::new(self.config.max_llm_calls_per_sequence);
        let mut trace = Vec::new();
        let mut levels_completed = Vec::new();
        let mut warnings = Vec::new();

        for level in Level::BOTTOM_UP {
            for unit in set.level(level) {
                let known = pattern_match(unit, &self.kb.read());
                let verdict = match known {
                    MatchResult::Known(v) => v,
                    MatchResult::Unknown if self.config.llm_mode == LlmMode::FlagUnknown => SeqVerdict {
                        level,
                        key: unit.key(),
                        rendered: unit.rendered(),
                        span: unit.span,
                        label: Label::Anomaly,
                        method: Method::FlagUnknown,
                        explanation: FLAG_UNKNOWN_EXPLANATION.to_string(),
                        llm_called: false,
                    },
                    MatchResult::Unknown => {
                        let examples = select_examples(&self.kb.read(), &unit.parent_path, level, self.config.k);
                        let templates = self.segment_templates(unit, sequence)?;
                        llm_verify(unit, examples, templates, self.llm, self.kb, &mut budget, &mut warnings)?
                    }
                };
                let anomalous = verdict.label == Label::Anomaly;
                trace.push(verdict);
                if anomalous {
                    let last = trace.last().expect("just pushed");
                    let segment = AnomalousSegment {
                        level,
                        key: last.key.clone(),
                        rendered: last.rendered.clone(),
                        span: unit.span,
                        events: segment_events(unit, sequence)?.to_vec(),
                    };
                    return Ok(DetectionReport {
                        sequence_id: sequence.sequence_id.clone(),
                        final_label: Label::Anomaly,
                        anomalous_segment: Some(segment),
                        explanation: last.explanation.clone(),
                        trace,
                        llm_call_count: budget.used,
                        levels_completed,
                        warnings,
                    });
                }
            }
            levels_completed.push(level);
        }
        Ok(DetectionReport {
            sequence_id: sequence.sequence_id.clone(),
            final_label: Label::Normal,
            anomalous_segment: None,
            explanation: NORMAL_EXPLANATION.to_string(),
            trace,
            llm_call_count: budget.used,
            levels_completed,
            warnings,
        })
    }

    fn segment_templates(&self, unit: &ExecSeq, sequence: &LogSequence) -> Result<Vec<String>, DetectError> {
        let Some(catalog) = self.catalog else { return Ok(Vec::new()) };
        Ok(segment_events(unit, sequence)?
            .iter()
            .map(|id| catalog.text(id).unwrap_or(id.as_str()).to_string())
            .collect())
    }
}

pub fn detect_sequence(
    sequence: &LogSequence,
    tree: &ExecTree,
    kb: &SharedKb,
    llm: &dyn LlmClient,
    config: &DetectorConfig,
) -> Result<DetectionReport, DetectError> {
    Detector::new(tree, kb, llm, config.clone()).detect(sequence)
}

/// Builds the client a mode needs. `Fixture` requires `fixture`; `Live` reads
/// the endpoint from the environment. `FlagUnknown` gets a client that is
/// never called.
pub fn client_for_mode(mode: LlmMode, fixture: Option<Arc<FixtureLlm>>) -> Result<Arc<dyn LlmClient>, LlmError> {
    Ok(match mode {
        LlmMode::AlwaysAnomaly => Arc::new(MockLlm::new(MockBehavior::AlwaysAnomaly)),
        LlmMode::AlwaysNormal => Arc::new(MockLlm::new(MockBehavior::AlwaysNormal)),
        LlmMode::FlagUnknown => Arc::new(crate::llm::NoLlm::default()),
        LlmMode::Fixture => fixture.ok_or_else(|| LlmError::Unavailable("fixture mode without a fixture".into()))?,
        LlmMode::Live => Arc::new(LiveLlm::from_env()?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SequenceCorpus, Split};
    use crate::hierarchy::{build_tree, SemanticTriple};
    use crate::kb::ingest_training;
    use crate::llm::{NoLlm, MOCK_ANOMALY_EXPLANATION};

    fn tree3() -> (TemplateCatalog, ExecTree) {
        let cat = TemplateCatalog::from_pairs([
            ("T1", "Open session started"),
            ("T2", "Open session succeeded"),
            ("T3", "Write block started"),
        ])
        .unwrap();
        let triples = [
            SemanticTriple::new("T1", "session", "open", "started").unwrap(),
            SemanticTriple::new("T2", "session", "open", "succeeded").unwrap(),
            SemanticTriple::new("T3", "block", "write", "started").unwrap(),
        ];
        let tree = build_tree(&cat, &triples).unwrap();
        (cat, tree)
    }

    fn trained(cat: &TemplateCatalog, tree: &ExecTree) -> SharedKb {
        let corpus = SequenceCorpus::new(
            Split::Train,
            vec![LogSequence::new("t", ["T1", "T2", "T3"], Some(Label::Normal))],
            cat,
        )
        .unwrap();
        let mut kb = KnowledgeBase::new();
        ingest_training(&corpus, tree, &mut kb).unwrap();
        SharedKb::new(kb)
    }

    fn seq(id: &str, events: &[&str]) -> LogSequence {
        LogSequence::new(id, events.iter().copied(), None)
    }

    #[test]
    fn pattern_match_cases() {
        let (cat, tree) = tree3();
        let s = seq("x", &["T1", "T2", "T3"]);
        let set = decompose(&s, &tree).unwrap();
        assert_eq!(pattern_match(&set.s_seqs[0], &KnowledgeBase::new()), MatchResult::Unknown);
        let kb = trained(&cat, &tree);
        let result = pattern_match(&set.s_seqs[0], &kb.read());
        match result {
            MatchResult::Known(v) => assert_eq!((v.label, v.method), (Label::Normal, Method::PatternMatch)),
            MatchResult::Unknown => panic!("expected known"),
        }
        kb.write().upsert(set.s_seqs[1].key(), Label::Anomaly, "odd", Provenance::LlmVerdict, None).unwrap_err();
        let other = seq("y", &["T1"]);
        let unit = &decompose(&other, &tree).unwrap().s_seqs[0];
        kb.write().upsert(unit.key(), Label::Anomaly, "odd", Provenance::LlmVerdict, None).unwrap();
        let result = pattern_match(unit, &kb.read());
        match result {
            MatchResult::Known(v) => assert_eq!((v.label, v.method), (Label::Anomaly, Method::KnowledgeReuse)),
            MatchResult::Unknown => panic!("expected known"),
        }
    }

    #[test]
    fn example_selection() {
        let mut kb = KnowledgeBase::new();
        let parent: Vec<String> = ["root", "a", "b"].iter().map(|s| s.to_string()).collect();
        assert!(select_examples(&kb, &parent, Level::Status, 5).is_empty());
        let add = |kb: &mut KnowledgeBase, nodes: &[&str], n: usize, label: Label| {
            for _ in 0..n {
                let prov = if label == Label::Normal { Provenance::TrainingPattern } else { Provenance::LlmVerdict };
                kb.upsert(ScopeKey::new(Level::Status, parent.clone(), nodes.iter().copied()), label, "", prov, None)
                    .unwrap();
            }
        };
        add(&mut kb, &["x"], 1, Label::Normal);
        add(&mut kb, &["z", "y"], 2, Label::Normal);
        assert_eq!(select_examples(&kb, &parent, Level::Status, 5), ["b → z, y", "b → x"]);
        // Equal frequency: canonical key order.
        add(&mut kb, &["c"], 2, Label::Normal);
        add(&mut kb, &["bad"], 9, Label::Anomaly);
        assert_eq!(select_examples(&kb, &parent, Level::Status, 5), ["b → c", "b → z, y", "b → x"]);
        assert_eq!(select_examples(&kb, &parent, Level::Status, 1), ["b → c"]);
        assert!(select_examples(&kb, &parent, Level::Action, 5).is_empty());
    }

    #[test]
    fn full_reuse_is_normal_without_llm() {
        let (cat, tree) = tree3();
        let kb = trained(&cat, &tree);
        let llm = NoLlm::default();
        let r = detect_sequence(
            &seq("x", &["T1", "T2", "T3"]),
            &tree,
            &kb,
            &llm,
            &DetectorConfig::with_mode(LlmMode::AlwaysAnomaly),
        )
        .unwrap();
        assert_eq!(r.final_label, Label::Normal);
        assert_eq!(r.llm_call_count, 0);
        assert_eq!(r.levels_completed, Level::BOTTOM_UP);
        assert_eq!(r.trace.len(), 5);
        assert!(r.trace.iter().all(|v| v.label == Label::Normal && v.method == Method::PatternMatch));
        assert!(r.anomalous_segment.is_none());
    }

    #[test]
    fn one_unknown_s_seq_stops_early() {
        let (cat, tree) = tree3();
        let kb = trained(&cat, &tree);
        let llm = MockLlm::new(MockBehavior::AlwaysAnomaly);
        let cfg = DetectorConfig::with_mode(LlmMode::AlwaysAnomaly);
        let x = seq("x", &["T1", "T3"]);
        let r = Detector::new(&tree, &kb, &llm, cfg.clone()).with_catalog(&cat).detect(&x).unwrap();
        assert_eq!(r.final_label, Label::Anomaly);
        assert_eq!(r.llm_call_count, 1);
        let seg = r.anomalous_segment.as_ref().unwrap();
        assert_eq!(seg.span, Span::new(0, 1));
        assert_eq!(seg.events, [TemplateId::from("T1")]);
        assert_eq!(r.explanation, MOCK_ANOMALY_EXPLANATION);
        assert!(r.trace.iter().all(|v| v.level == Level::Status));
        assert_eq!(r.trace.len(), 1);
        assert!(r.levels_completed.is_empty());
        assert_eq!(r.trace.last().unwrap().method, Method::Llm);

        let again = detect_sequence(&x, &tree, &kb, &llm, &cfg).unwrap();
        assert_eq!(again.llm_call_count, 0);
        assert_eq!(again.final_label, r.final_label);
        assert_eq!(again.anomalous_segment, r.anomalous_segment);
        assert_eq!(again.trace.last().unwrap().method, Method::KnowledgeReuse);
        assert_eq!(llm.counts().verify, 1);
    }

    #[test]
    fn always_normal_becomes_reusable() {
        let (cat, tree) = tree3();
        let kb = trained(&cat, &tree);
        let llm = MockLlm::new(MockBehavior::AlwaysNormal);
        let cfg = DetectorConfig::with_mode(LlmMode::AlwaysNormal);
        let x = seq("x", &["T1", "T3"]);
        let r = detect_sequence(&x, &tree, &kb, &llm, &cfg).unwrap();
        assert_eq!(r.final_label, Label::Normal);
        // S: open→[started] unknown; A: both known; E: root→[session, block] known.
        assert_eq!(r.llm_call_count, 1);
        let r2 = detect_sequence(&x, &tree, &kb, &llm, &cfg).unwrap();
        assert_eq!(r2.llm_call_count, 0);
        assert_eq!(llm.counts().verify, 1);
    }

    #[test]
    fn fixture_verdict_passthrough() {
        let (cat, tree) = tree3();
        let kb = trained(&cat, &tree);
        let x = seq("x", &["T1", "T3"]);
        let key = decompose(&x, &tree).unwrap().s_seqs[0].key();
        let llm = FixtureLlm::new().with_verdict(&key, Label::Anomaly, "open started without success");
        let r = detect_sequence(&x, &tree, &kb, &llm, &DetectorConfig::with_mode(LlmMode::Fixture)).unwrap();
        assert_eq!(r.explanation, "open started without success");
        assert_eq!(kb.read().query(&key).unwrap().provenance, Provenance::LlmVerdict);
        let missing = seq("y", &["T2"]);
        let err =
            detect_sequence(&missing, &tree, &kb, &llm, &DetectorConfig::with_mode(LlmMode::Fixture)).unwrap_err();
        assert_eq!(err.code(), "LlmUnavailable");
    }

    #[test]
    fn budget_and_config_errors() {
        let (cat, tree) = tree3();
        let kb = trained(&cat, &tree);
        let llm = MockLlm::new(MockBehavior::AlwaysNormal);
        let mut cfg = DetectorConfig::with_mode(LlmMode::AlwaysNormal);
        cfg.max_llm_calls_per_sequence = 0;
        let err = detect_sequence(&seq("x", &["T1"]), &tree, &kb, &llm, &cfg).unwrap_err();
        assert!(matches!(err, DetectError::LlmCallBudgetExceeded(0)));
        // [T2, T1] needs S open→[succeeded, started] then A/E lookups; with
        // budget 1 the first unknown uses it, the E-level unknown exceeds it.
        cfg.max_llm_calls_per_sequence = 1;
        let err = detect_sequence(&seq("y", &["T3", "T1"]), &tree, &kb, &llm, &cfg).unwrap_err();
        assert_eq!(err.code(), "LlmCallBudgetExceeded");
        cfg.k = 0;
        assert_eq!(detect_sequence(&seq("z", &["T1"]), &tree, &kb, &llm, &cfg).unwrap_err().code(), "InvalidConfig");
    }

    #[test]
    fn flag_unknown_makes_no_calls() {
        let (cat, tree) = tree3();
        let kb = trained(&cat, &tree);
        let llm = NoLlm::default();
        let r = detect_sequence(&seq("x", &["T2", "T1"]), &tree, &kb, &llm, &DetectorConfig::default()).unwrap();
        assert_eq!(r.final_label, Label::Anomaly);
        assert_eq!(r.trace.last().unwrap().method, Method::FlagUnknown);
        assert_eq!((r.llm_call_count, llm.counts().verify), (0, 0));
        assert!(kb.read().query(&r.anomalous_segment.unwrap().key).is_none());
    }

    #[test]
    fn human_override_is_reused() {
        let (cat, tree) = tree3();
        let kb = trained(&cat, &tree);
        let llm = MockLlm::new(MockBehavior::AlwaysAnomaly);
        let cfg = DetectorConfig::with_mode(LlmMode::AlwaysAnomaly);
        let x = seq("x", &["T1", "T3"]);
        let r = detect_sequence(&x, &tree, &kb, &llm, &cfg).unwrap();
        let key = r.anomalous_segment.unwrap().key;
        kb.write().override_label(&key, Label::Normal, "benign retry").unwrap();
        let r = detect_sequence(&x, &tree, &kb, &llm, &cfg).unwrap();
        assert_eq!(r.final_label, Label::Normal);
        assert_eq!(r.llm_call_count, 0);
        assert_eq!(r.trace[0].method, Method::HumanOverrideReuse);
        assert_eq!(r.trace[0].explanation, "human override: benign retry");
    }

    #[test]
    fn mode_parsing() {
        for (s, m) in [
            ("live", LlmMode::Live),
            ("fixture", LlmMode::Fixture),
            ("always-anomaly", LlmMode::AlwaysAnomaly),
            ("always-normal", LlmMode::AlwaysNormal),
            ("flag-unknown", LlmMode::FlagUnknown),
        ] {
            assert_eq!(s.parse::<LlmMode>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), s);
        }
        assert!("nope".parse::<LlmMode>().is_err());
        let cfg: DetectorConfig = serde_json::from_str(r#"{"llm_mode":"always-anomaly","k":3}"#).unwrap();
        assert_eq!((cfg.k, cfg.max_llm_calls_per_sequence), (3, 10));
    }
}
