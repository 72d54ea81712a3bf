use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use loghier_core::corpus::{load_sequences, load_templates, write_sequences};
use loghier_core::detector::{client_for_mode, Detector};
use loghier_core::hdfs::{self, SynthConfig};
use loghier_core::hierarchy::{extract_catalog, write_triples, TreeDocument};
use loghier_core::kb::{ingest_training, node_summary};
use loghier_core::llm::{FixtureLlm, LiveLlm, LlmClient, NoLlm};
use loghier_core::metrics::Metrics;
use loghier_core::{
    build_tree, evaluate, DetectionReport, DetectorConfig, Error, ExecTree, KnowledgeBase, SequenceCorpus, SharedKb,
    Split, TemplateCatalog,
};
use loghier_server::{AppState, ServerConfig};

use crate::{Command, DetectOptions, Format, Sources};

pub struct Failure {
    pub code: String,
    pub message: String,
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        Failure { code: e.code().to_string(), message: e.to_string() }
    }
}

type Result<T> = std::result::Result<T, Failure>;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::ConvertHdfs { templates, traces, labels, train_normals, out_dir } => {
            convert_hdfs(&templates, &traces, labels.as_deref(), train_normals, &out_dir)
        }
        Command::SynthHdfs { out_dir, train, test, anomaly_rate, seed } => {
            synth_hdfs(&out_dir, SynthConfig { train, test, anomaly_rate, seed })
        }
        Command::Extract { sources, out, triples_out } => extract(&sources, out.as_deref(), triples_out.as_deref()),
        Command::Train { sources, train, store, format } => train_cmd(&sources, &train, store.as_deref(), format),
        Command::Detect { sources, options, test, seq, train, store, format } => {
            detect(&sources, &options, &test, seq.as_deref(), train.as_deref(), store.as_deref(), format)
        }
        Command::Eval { sources, options, test, train, store, format } => {
            eval(&sources, &options, &test, train.as_deref(), store.as_deref(), format)
        }
        Command::KbStats { sources, store, node, format } => kb_stats(&sources, &store, node.as_deref(), format),
        Command::Serve { addr, store, templates, fixture, verdicts, train, test, ui_dir, cors_origins, mode } => {
            let sources = Sources { templates, fixture, verdicts, jobs: 4 };
            serve(addr, store.as_deref(), &sources, train.as_deref(), test.as_deref(), ui_dir, cors_origins, mode)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(Error::Io)?))
}

fn convert_hdfs(
    templates: &Path,
    traces: &Path,
    labels: Option<&Path>,
    train_normals: usize,
    out_dir: &Path,
) -> Result<()> {
    let open = |p: &Path| File::open(p).map_err(Error::Io);
    let catalog = hdfs::read_loghub_templates(open(templates)?)?;
    let labels = match labels {
        Some(p) => Some(hdfs::read_anomaly_labels(open(p)?)?),
        None => None,
    };
    let sequences = hdfs::read_traces(open(traces)?, &catalog, labels.as_ref())?;
    let (train, test) = hdfs::split_train_test(sequences, train_normals, &catalog)?;
    write_dataset(out_dir, &catalog, None, &train, &test)
}

fn write_dataset(
    out_dir: &Path,
    catalog: &TemplateCatalog,
    triples_csv: Option<&str>,
    train: &SequenceCorpus,
    test: &SequenceCorpus,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(Error::Io)?;
    catalog.write_csv(create(&out_dir.join("templates.csv"))?)?;
    if let Some(csv) = triples_csv {
        std::fs::write(out_dir.join("triples.csv"), csv).map_err(Error::Io)?;
    }
    write_sequences(&train.sequences, create(&out_dir.join("train.csv"))?)?;
    write_sequences(&test.sequences, create(&out_dir.join("test.csv"))?)?;
    let anomalies = test.sequences.iter().filter(|s| s.label == Some(loghier_core::Label::Anomaly)).count();
    println!("templates  {}", catalog.len());
    println!("train      {}", train.len());
    println!("test       {} ({anomalies} anomalous)", test.len());
    Ok(())
}

fn synth_hdfs(out_dir: &Path, config: SynthConfig) -> Result<()> {
    let (train, test) = hdfs::synthesize(&config);
    write_dataset(out_dir, &hdfs::bundled_catalog(), Some(hdfs::TRIPLES_CSV), &train, &test)
}

fn catalog_and_fixture(sources: &Sources) -> Result<(TemplateCatalog, FixtureLlm)> {
    let catalog = match &sources.templates {
        Some(p) => load_templates(p)?,
        None => hdfs::bundled_catalog(),
    };
    let mut fixture = match (&sources.fixture, &sources.templates) {
        (Some(p), _) => FixtureLlm::new().load_triples(p)?,
        (None, None) => hdfs::bundled_fixture(),
        (None, Some(_)) => FixtureLlm::new(),
    };
    if let Some(v) = &sources.verdicts {
        fixture = fixture.load_verdicts(v)?;
    }
    Ok((catalog, fixture))
}

fn live_or_none() -> Box<dyn LlmClient> {
    match LiveLlm::from_env() {
        Ok(l) => Box::new(l),
        Err(_) => Box::new(NoLlm::default()),
    }
}

/// Builds the tree; templates the fixture does not cover go to the live endpoint.
fn tree_for(
    catalog: &TemplateCatalog,
    fixture: &FixtureLlm,
    jobs: usize,
) -> Result<(ExecTree, Vec<loghier_core::SemanticTriple>)> {
    let live = live_or_none();
    let extractions = extract_catalog(catalog, Some(fixture), live.as_ref(), jobs.max(1))?;
    let triples: Vec<_> = extractions.into_iter().map(|e| e.triple).collect();
    Ok((build_tree(catalog, &triples)?, triples))
}

fn extract(sources: &Sources, out: Option<&Path>, triples_out: Option<&Path>) -> Result<()> {
    let (catalog, fixture) = catalog_and_fixture(sources)?;
    let (tree, triples) = tree_for(&catalog, &fixture, sources.jobs)?;
    let doc = TreeDocument::new(&tree, &catalog);
    if let Some(path) = out {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &doc).map_err(io::Error::from).map_err(Error::Io)?;
        w.flush().map_err(Error::Io)?;
    }
    if let Some(path) = triples_out {
        write_triples(&triples, create(path)?).map_err(Error::Io)?;
    }
    let s = &doc.stats;
    println!("templates  {}", s.template_count);
    println!("entities   {}", s.entity_count);
    println!("actions    {}", s.action_count);
    println!("statuses   {}", s.status_count);
    Ok(())
}

fn set_jobs(jobs: usize) {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
}

/// Loads the store (if any), ingests `train` into it, then attaches it so
/// later verdicts are journaled.
fn knowledge(
    store: Option<&Path>,
    train: Option<&Path>,
    catalog: &TemplateCatalog,
    tree: &ExecTree,
) -> Result<(KnowledgeBase, Option<loghier_core::kb::IngestReport>)> {
    let mut kb = match store {
        Some(p) if p.exists() => KnowledgeBase::load(p)?,
        _ => KnowledgeBase::new(),
    };
    let report = match train {
        Some(path) => {
            let corpus = load_sequences(path, catalog, Split::Train)?;
            Some(ingest_training(&corpus, tree, &mut kb)?)
        }
        None => None,
    };
    if let Some(p) = store {
        kb.attach(p)?;
    }
    Ok((kb, report))
}

fn train_cmd(sources: &Sources, train: &Path, store: Option<&Path>, format: Format) -> Result<()> {
    set_jobs(sources.jobs);
    let (catalog, fixture) = catalog_and_fixture(sources)?;
    let (tree, _) = tree_for(&catalog, &fixture, sources.jobs)?;
    let (kb, report) = knowledge(store, Some(train), &catalog, &tree)?;
    let report = report.expect("train path given");
    match format {
        Format::Jsonl => println!("{}", serde_json::to_string(&report).expect("serializable")),
        Format::Table => {
            println!("sequences           {}", report.sequences);
            println!("new entries         {}", report.new_entries);
            println!("observations        {}", report.total_observations);
            println!("store entries       {}", kb.len());
        }
    }
    Ok(())
}

fn detector_config(options: &DetectOptions) -> DetectorConfig {
    DetectorConfig {
        k: options.k,
        llm_mode: options.mode,
        max_llm_calls_per_sequence: options.budget,
        ..DetectorConfig::default()
    }
}

struct Session {
    catalog: TemplateCatalog,
    tree: ExecTree,
    kb: SharedKb,
    llm: Arc<dyn LlmClient>,
    config: DetectorConfig,
    test: SequenceCorpus,
}

impl Session {
    fn open(
        sources: &Sources,
        options: &DetectOptions,
        test: &Path,
        train: Option<&Path>,
        store: Option<&Path>,
    ) -> Result<Self> {
        let (catalog, fixture) = catalog_and_fixture(sources)?;
        let (tree, _) = tree_for(&catalog, &fixture, sources.jobs)?;
        let (kb, _) = knowledge(store, train, &catalog, &tree)?;
        let test = load_sequences(test, &catalog, Split::Test)?;
        let llm = client_for_mode(options.mode, Some(Arc::new(fixture)))?;
        Ok(Self { catalog, tree, kb: SharedKb::new(kb), llm, config: detector_config(options), test })
    }

    fn detector(&self) -> Detector<'_> {
        Detector::new(&self.tree, &self.kb, self.llm.as_ref(), self.config.clone()).with_catalog(&self.catalog)
    }
}

fn report_line(r: &DetectionReport) -> String {
    match &r.anomalous_segment {
        Some(seg) => format!(
            "{}\t{}\tlevel={}\tspan=[{},{})\tllm_calls={}\tsegment=\"{}\"\t{}",
            r.sequence_id,
            r.final_label,
            seg.level,
            seg.span.start,
            seg.span.end,
            r.llm_call_count,
            seg.rendered,
            r.explanation
        ),
        None => format!("{}\t{}\tllm_calls={}\t{}", r.sequence_id, r.final_label, r.llm_call_count, r.explanation),
    }
}

fn print_report(r: &DetectionReport, format: Format) {
    match format {
        Format::Table => println!("{}", report_line(r)),
        Format::Jsonl => println!("{}", serde_json::to_string(r).expect("serializable")),
    }
}

fn detect(
    sources: &Sources,
    options: &DetectOptions,
    test: &Path,
    seq: Option<&str>,
    train: Option<&Path>,
    store: Option<&Path>,
    format: Format,
) -> Result<()> {
    let session = Session::open(sources, options, test, train, store)?;
    let detector = session.detector();
    let sequences: Vec<_> = match seq {
        Some(id) => vec![session.test.get(id).ok_or_else(|| Failure {
            code: "UnknownSequence".into(),
            message: format!("sequence {id} not found in {}", test.display()),
        })?],
        None => session.test.sequences.iter().collect(),
    };
    for s in sequences {
        print_report(&detector.detect(s)?, format);
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into())
}

fn metrics_table(m: &Metrics) -> String {
    let c = &m.confusion;
    let rows = [
        ("sequences", m.sequences.to_string()),
        ("tp / fp / tn / fn", format!("{} / {} / {} / {}", c.tp, c.fp, c.tn, c.fn_)),
        ("precision", fmt_opt(m.precision)),
        ("recall", fmt_opt(m.recall)),
        ("f1", fmt_opt(m.f1)),
        ("llm calls", m.llm_calls.to_string()),
        ("llm call fraction", fmt_opt(m.llm_call_fraction)),
        ("total events", m.total_events.to_string()),
        ("distinct keys", m.distinct_keys.to_string()),
        ("distinct seq ratio", fmt_opt(m.distinct_seq_ratio)),
    ];
    rows.iter().map(|(k, v)| format!("{k:<20}{v}\n")).collect()
}

fn eval(
    sources: &Sources,
    options: &DetectOptions,
    test: &Path,
    train: Option<&Path>,
    store: Option<&Path>,
    format: Format,
) -> Result<()> {
    let session = Session::open(sources, options, test, train, store)?;
    let evaluation = evaluate(&session.test, &session.detector(), sources.jobs)?;
    match format {
        Format::Table => print!("{}", metrics_table(&evaluation.metrics)),
        Format::Jsonl => {
            for r in &evaluation.reports {
                print_report(r, format);
            }
        }
    }
    println!("{}", serde_json::json!({ "metrics": evaluation.metrics }));
    Ok(())
}

fn kb_stats(sources: &Sources, store: &Path, node: Option<&str>, format: Format) -> Result<()> {
    let (catalog, fixture) = catalog_and_fixture(sources)?;
    let (tree, _) = tree_for(&catalog, &fixture, sources.jobs)?;
    let kb = KnowledgeBase::load(store)?;
    let path: Vec<&str> = node.unwrap_or("root").split('/').collect();
    let id = tree.find_path(&path).ok_or_else(|| Failure {
        code: "UnknownNode".into(),
        message: format!("no tree node at {}", path.join("/")),
    })?;
    let s = node_summary(&kb, &tree, id)?;
    match format {
        Format::Jsonl => println!("{}", serde_json::to_string(&s).expect("serializable")),
        Format::Table => {
            println!("node                {}", s.label_path.join("/"));
            println!("entries             {}", s.entries);
            println!("S / A / E           {} / {} / {}", s.per_level.status, s.per_level.action, s.per_level.entity);
            println!("normal / anomaly    {} / {}", s.normal, s.anomaly);
            println!("human overrides     {}", s.human_overrides);
            println!("total frequency     {}", s.total_frequency);
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn serve(
    addr: std::net::SocketAddr,
    store: Option<&Path>,
    sources: &Sources,
    train: Option<&Path>,
    test: Option<&Path>,
    ui_dir: Option<PathBuf>,
    cors_origins: Vec<String>,
    mode: loghier_core::LlmMode,
) -> Result<()> {
    let kb = match store {
        Some(p) => KnowledgeBase::open(p)?,
        None => KnowledgeBase::new(),
    };
    let fixture = match (&sources.templates, &sources.fixture, &sources.verdicts) {
        (None, None, None) => None,
        _ => Some(Arc::new(catalog_and_fixture(sources)?.1)),
    };
    let config =
        ServerConfig { fixture: fixture.clone(), detector: DetectorConfig::with_mode(mode), cors_origins, ui_dir };
    let state = AppState::new(config, kb);
    if let Some(path) = &sources.templates {
        let catalog = load_templates(path)?;
        state.set_catalog(catalog.clone());
        if let Some(fx) = fixture.as_ref().filter(|fx| catalog.ids().all(|id| fx.covers(id))) {
            state.set_tree(tree_for(&catalog, fx, sources.jobs)?.0);
        }
        if let Some(p) = train {
            state.add_corpus("train", load_sequences(p, &catalog, Split::Train)?);
        }
        if let Some(p) = test {
            state.add_corpus("test", load_sequences(p, &catalog, Split::Test)?);
        }
    }
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(Error::Io)?;
    runtime.block_on(loghier_server::serve(addr, state)).map_err(Error::Io)?;
    Ok(())
}
