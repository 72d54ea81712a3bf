//! HTTP facade over the engine: one session per process holding the template
//! catalog, the tree, named corpora, the knowledge base and the last detection
//! report per sequence.
//!
//! Every success body is the JSON serialization of the corresponding library
//! value; errors are `{code, message, detail}`.

pub mod error;
pub mod jobs;
mod routes;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::http::HeaderValue;
use axum::Router;
use loghier_core::detector::DetectorConfig;
use loghier_core::llm::FixtureLlm;
use loghier_core::{DetectionReport, ExecTree, KnowledgeBase, LogSequence, SequenceCorpus, SharedKb, TemplateCatalog};
use parking_lot::RwLock;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::services::ServeDir;

pub use error::{ApiError, ErrorBody};
pub use jobs::{JobRegistry, JobState, JobStatus};
pub use routes::*;

#[derive(Clone, Default)]
pub struct ServerConfig {
    /// Triples and verdicts answered without a live model.
    pub fixture: Option<Arc<FixtureLlm>>,
    /// Defaults for detection requests that omit fields.
    pub detector: DetectorConfig,
    /// Allowed browser origins; empty means any origin.
    pub cors_origins: Vec<String>,
    /// Directory of static UI assets served under `/`.
    pub ui_dir: Option<PathBuf>,
}

#[derive(Default)]
pub(crate) struct Session {
    pub catalog: Option<Arc<TemplateCatalog>>,
    pub tree: Option<Arc<ExecTree>>,
    pub corpora: BTreeMap<String, Arc<SequenceCorpus>>,
    pub reports: BTreeMap<String, DetectionReport>,
}

pub struct AppState {
    pub config: ServerConfig,
    pub kb: Arc<SharedKb>,
    pub jobs: Arc<JobRegistry>,
    session: RwLock<Session>,
}

impl AppState {
    pub fn new(config: ServerConfig, kb: KnowledgeBase) -> Arc<Self> {
        Arc::new(Self {
            config,
            kb: Arc::new(SharedKb::new(kb)),
            jobs: Arc::new(JobRegistry::default()),
            session: RwLock::new(Session::default()),
        })
    }

    /// Replaces the catalog. The tree, corpora and reports depend on it and are dropped.
    pub fn set_catalog(&self, catalog: TemplateCatalog) {
        let mut s = self.session.write();
        *s = Session { catalog: Some(Arc::new(catalog)), ..Session::default() };
    }

    pub fn set_tree(&self, tree: ExecTree) {
        let mut s = self.session.write();
        s.tree = Some(Arc::new(tree));
        s.reports.clear();
    }

    pub fn add_corpus(&self, name: &str, corpus: SequenceCorpus) {
        self.session.write().corpora.insert(name.to_string(), Arc::new(corpus));
    }

    pub fn catalog(&self) -> Option<Arc<TemplateCatalog>> {
        self.session.read().catalog.clone()
    }

    pub fn tree(&self) -> Option<Arc<ExecTree>> {
        self.session.read().tree.clone()
    }

    pub fn corpus(&self, name: &str) -> Option<Arc<SequenceCorpus>> {
        self.session.read().corpora.get(name).cloned()
    }

    /// Finds a sequence by id, in `corpus` if given, otherwise in the first
    /// corpus (by name) that has it.
    pub fn sequence(&self, id: &str, corpus: Option<&str>) -> Option<LogSequence> {
        let s = self.session.read();
        match corpus {
            Some(name) => s.corpora.get(name)?.get(id).cloned(),
            None => s.corpora.values().find_map(|c| c.get(id).cloned()),
        }
    }

    pub fn report(&self, id: &str) -> Option<DetectionReport> {
        self.session.read().reports.get(id).cloned()
    }

    pub(crate) fn store_report(&self, report: DetectionReport) {
        self.session.write().reports.insert(report.sequence_id.clone(), report);
    }

    pub(crate) fn session(&self) -> parking_lot::RwLockReadGuard<'_, Session> {
        self.session.read()
    }
}

fn cors(origins: &[String]) -> CorsLayer {
    if origins.is_empty() {
        return CorsLayer::permissive();
    }
    let list: Vec<HeaderValue> = origins.iter().filter_map(|o| o.parse().ok()).collect();
    CorsLayer::new().allow_origin(AllowOrigin::list(list)).allow_methods(Any).allow_headers(Any)
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = cors(&state.config.cors_origins);
    let ui_dir = state.config.ui_dir.clone();
    let mut app = routes::api().with_state(state).layer(cors);
    if let Some(dir) = ui_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
