//! Sequence-level evaluation. `Anomaly` is the positive class.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SequenceCorpus;
use crate::decompose::decompose;
use crate::detector::{DetectError, DetectionReport, Detector};
use crate::kb::ScopeKey;
use crate::Label;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("sequence {0} has no label")]
    UnlabeledCorpus(String),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::UnlabeledCorpus(_) => "UnlabeledCorpus",
            EvalError::Detect(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut c = Confusion::default();
        for (truth, predicted) in pairs {
            match (truth, predicted) {
                (Label::Anomaly, Label::Anomaly) => c.tp += 1,
                (Label::Normal, Label::Anomaly) => c.fp += 1,
                (Label::Normal, Label::Normal) => c.tn += 1,
                (Label::Anomaly, Label::Normal) => c.fn_ += 1,
            }
        }
        c
    }

    /// `None` when nothing was predicted anomalous.
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `None` when the corpus has no anomalies.
    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2tp / (2tp + fp + fn)`; `None` only when there are no positives at all.
    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sequences: usize,
    pub confusion: Confusion,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub llm_calls: usize,
    /// LLM calls per test sequence.
    pub llm_call_fraction: Option<f64>,
    pub total_events: usize,
    /// Distinct unit keys across the test corpus decompositions.
    pub distinct_keys: usize,
    /// `total_events / distinct_keys`.
    pub distinct_seq_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub reports: Vec<DetectionReport>,
}

/// Detects every sequence of a labeled test corpus and scores the result.
///
/// With `jobs > 1` sequences are detected in parallel; LLM call counts can
/// then differ slightly from a sequential run because two workers may both
/// miss the knowledge base for the same new unit.
pub fn evaluate(corpus: &SequenceCorpus, detector: &Detector<'_>, jobs: usize) -> Result<Evaluation, EvalError> {
    let truths = corpus
        .sequences
        .iter()
        .map(|s| s.label.ok_or_else(|| EvalError::UnlabeledCorpus(s.sequence_id.clone())))
        .collect::<Result<Vec<_>, _>>()?;

    let reports: Vec<DetectionReport> = if jobs <= 1 {
        corpus.sequences.iter().map(|s| detector.detect(s)).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().expect("thread pool");
        pool.install(|| corpus.sequences.par_iter().map(|s| detector.detect(s)).collect::<Result<_, _>>())?
    };

    let mut keys: HashSet<ScopeKey> = HashSet::new();
    for s in &corpus.sequences {
        let set = decompose(s, detector.tree).map_err(DetectError::from)?;
        keys.extend(set.iter().map(|u| u.key()));
    }

    let confusion = Confusion::from_pairs(truths.iter().copied().zip(reports.iter().map(|r| r.final_label)));
    let llm_calls = reports.iter().map(|r| r.llm_call_count).sum();
    let total_events = corpus.total_events();
    let metrics = Metrics {
        sequences: corpus.len(),
        confusion,
        precision: confusion.precision(),
        recall: confusion.recall(),
        f1: confusion.f1(),
        llm_calls,
        llm_call_fraction: ratio(llm_calls, corpus.len()),
        total_events,
        distinct_keys: keys.len(),
        distinct_seq_ratio: ratio(total_events, keys.len()),
    };
    Ok(Evaluation { metrics, reports })
}
