use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use loghier_core::corpus::{read_sequences, read_templates, validate_corpus, CorpusError, ValidationReport};
use loghier_core::decompose::DecompositionRecord;
use loghier_core::detector::{client_for_mode, Detector};
use loghier_core::hierarchy::NodeId;
use loghier_core::hierarchy::{build_tree, extract_catalog, TreeDocument};
use loghier_core::kb::{ingest_training_with_progress, node_summary, IngestReport, NodeSummary};
use loghier_core::llm::{FixtureLlm, LiveLlm, LlmClient, NoLlm};
use loghier_core::metrics::Confusion;
use loghier_core::{
    decompose, DetectionReport, DetectorConfig, Error, KnowledgeEntry, Label, LlmMode, LogSequence, ScopeKey, Split,
    TemplateCatalog,
};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::jobs::{JobHandle, JobStatus};
use crate::AppState;

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared = State<Arc<AppState>>;

pub(crate) fn api() -> Router<Arc<AppState>> {
    Router::new()
        .route("/templates", get(list_templates).post(load_templates))
        .route("/sequences", get(list_corpora).post(load_sequences))
        .route("/sequences/{id}/decomposition", get(decomposition))
        .route("/hierarchy", get(hierarchy))
        .route("/hierarchy/extract", post(extract))
        .route("/train", post(train))
        .route("/train/status", get(train_status))
        .route("/detect/{id}", post(detect))
        .route("/detect/{id}/report", get(detect_report))
        .route("/jobs/detect", post(detect_batch))
        .route("/jobs/{id}", get(job_status))
        .route("/kb/nodes/{node}/summary", get(kb_node_summary))
        .route("/kb/entries", get(kb_entries))
        .route("/kb/entries/{key}", get(kb_entry))
        .route("/kb/entries/{key}/override", post(kb_override))
}

/// CSV supplied inline or as a server-side path.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Payload {
    pub content: Option<String>,
    pub path: Option<String>,
}

impl Payload {
    fn bytes(&self) -> Result<Vec<u8>, ApiError> {
        match (&self.content, &self.path) {
            (Some(c), None) => Ok(c.clone().into_bytes()),
            (None, Some(p)) => std::fs::read(p).map_err(|e| Error::Io(e).into()),
            _ => Err(ApiError::bad_request("MalformedRecord", "give exactly one of `content` or `path`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplatesLoaded {
    pub templates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRow {
    pub template_id: String,
    pub template_text: String,
}

async fn load_templates(State(state): Shared, Json(body): Json<Payload>) -> ApiResult<TemplatesLoaded> {
    let catalog = read_templates(body.bytes()?.as_slice())?;
    let templates = catalog.len();
    state.set_catalog(catalog);
    Ok(Json(TemplatesLoaded { templates }))
}

async fn list_templates(State(state): Shared) -> ApiResult<Vec<TemplateRow>> {
    let catalog = state.catalog().ok_or_else(ApiError::catalog_not_ready)?;
    Ok(Json(
        catalog
            .iter()
            .map(|(id, text)| TemplateRow { template_id: id.to_string(), template_text: text.to_string() })
            .collect(),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequencesRequest {
    pub name: String,
    pub split: Split,
    #[serde(flatten)]
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub name: String,
    pub split: Split,
    pub report: ValidationReport,
    pub sequence_ids: Vec<String>,
}

fn catalog_or_409(state: &AppState) -> Result<Arc<TemplateCatalog>, ApiError> {
    state.catalog().ok_or_else(ApiError::catalog_not_ready)
}

async fn load_sequences(State(state): Shared, Json(body): Json<SequencesRequest>) -> ApiResult<CorpusInfo> {
    let catalog = catalog_or_409(&state)?;
    let corpus = read_sequences(body.payload.bytes()?.as_slice(), &catalog, body.split)?;
    let info = CorpusInfo {
        name: body.name.clone(),
        split: corpus.split,
        report: validate_corpus(&corpus, &catalog),
        sequence_ids: corpus.sequences.iter().map(|s| s.sequence_id.clone()).collect(),
    };
    state.add_corpus(&body.name, corpus);
    Ok(Json(info))
}

async fn list_corpora(State(state): Shared) -> ApiResult<Vec<CorpusInfo>> {
    let catalog = catalog_or_409(&state)?;
    let session = state.session();
    Ok(Json(
        session
            .corpora
            .iter()
            .map(|(name, c)| CorpusInfo {
                name: name.clone(),
                split: c.split,
                report: validate_corpus(c, &catalog),
                sequence_ids: c.sequences.iter().map(|s| s.sequence_id.clone()).collect(),
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct CorpusQuery {
    pub corpus: Option<String>,
}

fn find_sequence(state: &AppState, id: &str, corpus: Option<&str>) -> Result<LogSequence, ApiError> {
    state.sequence(id, corpus).ok_or_else(|| ApiError::not_found("UnknownSequence", id))
}

async fn decomposition(
    State(state): Shared,
    Path(id): Path<String>,
    Query(q): Query<CorpusQuery>,
) -> ApiResult<DecompositionRecord> {
    let tree = state.tree().ok_or_else(ApiError::tree_not_ready)?;
    let seq = find_sequence(&state, &id, q.corpus.as_deref())?;
    let set = decompose(&seq, &tree)?;
    Ok(Json(DecompositionRecord::new(&seq, &set)))
}

async fn hierarchy(State(state): Shared) -> ApiResult<TreeDocument> {
    let tree = state.tree().ok_or_else(ApiError::tree_not_ready)?;
    let catalog = catalog_or_409(&state)?;
    Ok(Json(TreeDocument::new(&tree, &catalog)))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractRequest {
    /// Triples CSV overriding the server's fixture for this run.
    pub triples: Option<String>,
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractResponse {
    pub tree: TreeDocument,
    /// Templates that needed a live model call.
    pub live_extractions: usize,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

async fn extract(State(state): Shared, body: Option<Json<ExtractRequest>>) -> ApiResult<ExtractResponse> {
    let body = body.map(|b| b.0).unwrap_or_default();
    let catalog = catalog_or_409(&state)?;
    let fixture = match &body.triples {
        Some(csv) => Some(Arc::new(FixtureLlm::new().read_triples(csv.as_bytes())?)),
        None => state.config.fixture.clone(),
    };
    let response = blocking({
        let state = Arc::clone(&state);
        move || {
            let live: Box<dyn LlmClient> = match LiveLlm::from_env() {
                Ok(l) => Box::new(l),
                Err(_) => Box::new(NoLlm::default()),
            };
            let extractions =
                extract_catalog(&catalog, fixture.as_deref(), live.as_ref(), body.parallelism.unwrap_or(4))?;
            let triples: Vec<_> = extractions.into_iter().map(|e| e.triple).collect();
            let tree = build_tree(&catalog, &triples)?;
            let doc = TreeDocument::new(&tree, &catalog);
            state.set_tree(tree);
            Ok(ExtractResponse { tree: doc, live_extractions: live.counts().extract })
        }
    })
    .await?;
    Ok(Json(response))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRequest {
    pub corpus: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStarted {
    pub job_id: u64,
}

fn run_job(handle: JobHandle, work: impl FnOnce(&JobHandle) -> Result<serde_json::Value, ApiError> + Send + 'static) {
    tokio::task::spawn_blocking(move || match work(&handle) {
        Ok(v) => handle.finish(v),
        Err(e) => handle.fail(e.body),
    });
}

async fn train(
    State(state): Shared,
    Json(body): Json<TrainRequest>,
) -> Result<(StatusCode, Json<JobStarted>), ApiError> {
    let tree = state.tree().ok_or_else(ApiError::tree_not_ready)?;
    let corpus = state.corpus(&body.corpus).ok_or_else(|| ApiError::not_found("UnknownCorpus", &body.corpus))?;
    if let Some(bad) = corpus.sequences.iter().find(|s| s.label == Some(Label::Anomaly)) {
        return Err(CorpusError::LabeledTrainAnomaly(bad.sequence_id.clone()).into());
    }
    let handle = state.jobs.start("train", corpus.len());
    let id = handle.id;
    let kb = Arc::clone(&state.kb);
    run_job(handle, move |h| {
        let mut guard = kb.write();
        let report: IngestReport =
            ingest_training_with_progress(&corpus, &tree, &mut guard, &|done, total| h.progress(done, total))?;
        Ok(serde_json::to_value(report).expect("serializable"))
    });
    Ok((StatusCode::ACCEPTED, Json(JobStarted { job_id: id })))
}

async fn train_status(State(state): Shared) -> ApiResult<JobStatus> {
    state.jobs.latest("train").map(Json).ok_or_else(|| ApiError::not_found("UnknownJob", "train"))
}

async fn job_status(State(state): Shared, Path(id): Path<u64>) -> ApiResult<JobStatus> {
    state.jobs.get(id).map(Json).ok_or_else(|| ApiError::not_found("UnknownJob", &id.to_string()))
}

/// Detection options; omitted fields fall back to the server defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectRequest {
    pub mode: Option<LlmMode>,
    pub k: Option<usize>,
    pub budget: Option<usize>,
    pub corpus: Option<String>,
}

impl DetectRequest {
    pub fn config(&self, base: &DetectorConfig) -> DetectorConfig {
        DetectorConfig {
            k: self.k.unwrap_or(base.k),
            llm_mode: self.mode.unwrap_or(base.llm_mode),
            max_llm_calls_per_sequence: self.budget.unwrap_or(base.max_llm_calls_per_sequence),
            example_selection: base.example_selection,
        }
    }
}

fn detection_client(state: &AppState, mode: LlmMode) -> Result<Arc<dyn LlmClient>, ApiError> {
    Ok(client_for_mode(mode, state.config.fixture.clone())?)
}

async fn detect(
    State(state): Shared,
    Path(id): Path<String>,
    body: Option<Json<DetectRequest>>,
) -> ApiResult<DetectionReport> {
    let body = body.map(|b| b.0).unwrap_or_default();
    let tree = state.tree().ok_or_else(ApiError::tree_not_ready)?;
    let seq = find_sequence(&state, &id, body.corpus.as_deref())?;
    let config = body.config(&state.config.detector);
    let llm = detection_client(&state, config.llm_mode)?;
    let report = blocking({
        let state = Arc::clone(&state);
        move || {
            let catalog = state.catalog();
            let mut detector = Detector::new(&tree, &state.kb, llm.as_ref(), config);
            if let Some(c) = catalog.as_deref() {
                detector = detector.with_catalog(c);
            }
            let report = detector.detect(&seq)?;
            state.store_report(report.clone());
            Ok(report)
        }
    })
    .await?;
    Ok(Json(report))
}

async fn detect_report(State(state): Shared, Path(id): Path<String>) -> ApiResult<DetectionReport> {
    state.report(&id).map(Json).ok_or_else(|| ApiError::not_found("ReportNotFound", &id))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchDetectRequest {
    pub corpus: String,
    #[serde(flatten)]
    pub options: DetectRequest,
}

/// Result document of a finished batch detection job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub sequences: usize,
    pub anomalies: usize,
    pub llm_calls: usize,
    /// Present when every sequence carries a ground-truth label.
    pub confusion: Option<Confusion>,
}

async fn detect_batch(
    State(state): Shared,
    Json(body): Json<BatchDetectRequest>,
) -> Result<(StatusCode, Json<JobStarted>), ApiError> {
    let tree = state.tree().ok_or_else(ApiError::tree_not_ready)?;
    let corpus = state.corpus(&body.corpus).ok_or_else(|| ApiError::not_found("UnknownCorpus", &body.corpus))?;
    let config = body.options.config(&state.config.detector);
    let llm = detection_client(&state, config.llm_mode)?;
    let handle = state.jobs.start("detect", corpus.len());
    let id = handle.id;
    let state = Arc::clone(&state);
    run_job(handle, move |h| {
        let catalog = state.catalog();
        let mut detector = Detector::new(&tree, &state.kb, llm.as_ref(), config);
        if let Some(c) = catalog.as_deref() {
            detector = detector.with_catalog(c);
        }
        let mut summary = BatchSummary { sequences: corpus.len(), anomalies: 0, llm_calls: 0, confusion: None };
        let mut pairs = Vec::new();
        for (i, seq) in corpus.sequences.iter().enumerate() {
            let report = detector.detect(seq)?;
            summary.llm_calls += report.llm_call_count;
            if report.final_label == Label::Anomaly {
                summary.anomalies += 1;
            }
            if let Some(truth) = seq.label {
                pairs.push((truth, report.final_label));
            }
            state.store_report(report);
            h.progress(i + 1, corpus.len());
        }
        if pairs.len() == corpus.len() {
            summary.confusion = Some(Confusion::from_pairs(pairs));
        }
        Ok(serde_json::to_value(summary).expect("serializable"))
    });
    Ok((StatusCode::ACCEPTED, Json(JobStarted { job_id: id })))
}

async fn kb_node_summary(State(state): Shared, Path(node): Path<u32>) -> ApiResult<NodeSummary> {
    let tree = state.tree().ok_or_else(ApiError::tree_not_ready)?;
    let summary = node_summary(&state.kb.read(), &tree, NodeId(node))?;
    Ok(Json(summary))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EntriesQuery {
    /// Parent label path joined with `/`, e.g. `root/block/write`.
    pub parent: Option<String>,
    /// `S`, `A` or `E`.
    pub level: Option<String>,
}

async fn kb_entries(State(state): Shared, Query(q): Query<EntriesQuery>) -> ApiResult<Vec<KnowledgeEntry>> {
    let level = match q.level.as_deref() {
        Some(l) => Some(l.parse().map_err(|e: String| ApiError::bad_request("InvalidQuery", e))?),
        None => None,
    };
    let parent: Option<Vec<String>> = q.parent.as_deref().map(|p| p.split('/').map(str::to_string).collect());
    let kb = state.kb.read();
    Ok(Json(kb.list(parent.as_deref(), level).into_iter().cloned().collect()))
}

fn parse_key(raw: &str) -> Result<ScopeKey, ApiError> {
    raw.parse().map_err(|e: String| ApiError::bad_request("InvalidKey", e))
}

async fn kb_entry(State(state): Shared, Path(key): Path<String>) -> ApiResult<KnowledgeEntry> {
    let key = parse_key(&key)?;
    let kb = state.kb.read();
    kb.query(&key).cloned().map(Json).ok_or_else(|| ApiError::not_found("UnknownKey", &key.canonical()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverrideRequest {
    pub label: Label,
    #[serde(default)]
    pub note: String,
}

async fn kb_override(
    State(state): Shared,
    Path(key): Path<String>,
    Json(body): Json<OverrideRequest>,
) -> ApiResult<KnowledgeEntry> {
    let key = parse_key(&key)?;
    let entry = state.kb.write().override_label(&key, body.label, &body.note)?;
    Ok(Json(entry))
}
