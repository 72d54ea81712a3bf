mod commands;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use loghier_core::LlmMode;

/// Hierarchical log anomaly detection over template-ID sequences.
#[derive(Debug, Parser)]
#[command(name = "loghier", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Jsonl,
}

/// Where the catalog and model answers come from. With no `--templates`, the
/// bundled HDFS templates and their triple fixture are used.
#[derive(Debug, Clone, Args)]
struct Sources {
    /// Template catalog CSV (`template_id,template_text`).
    #[arg(long, env = "LOGHIER_TEMPLATES")]
    templates: Option<PathBuf>,
    /// Triple fixture CSV (`template_id,entity,action,status`).
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Verdict fixture CSV (`scope_key,label,explanation`) for `--mode fixture`.
    #[arg(long)]
    verdicts: Option<PathBuf>,
    /// Concurrent extraction or detection workers.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Clone, Args)]
struct DetectOptions {
    #[arg(long, default_value = "flag-unknown")]
    mode: LlmMode,
    /// Normal examples per verification prompt.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// LLM calls allowed per sequence.
    #[arg(long, default_value_t = 10)]
    budget: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert loghub-layout HDFS files into template and sequence CSVs.
    ConvertHdfs {
        /// loghub templates file (`EventId,EventTemplate`).
        #[arg(long)]
        templates: PathBuf,
        /// Per-block traces (`BlockId` plus `Features` or `EventSequence`).
        #[arg(long)]
        traces: PathBuf,
        /// `BlockId,Label` file; falls back to a `Label` column in the traces.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Normal blocks assigned to the training split, in file order.
        #[arg(long, default_value_t = 5000)]
        train_normals: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a seeded synthetic HDFS-like corpus with the bundled templates.
    SynthHdfs {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 10000)]
        test: usize,
        #[arg(long, default_value_t = 0.03)]
        anomaly_rate: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Extract triples for every template and build the tree.
    Extract {
        #[command(flatten)]
        sources: Sources,
        /// Write the tree document here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the extracted triples here, in fixture layout.
        #[arg(long)]
        triples_out: Option<PathBuf>,
    },
    /// Ingest normal training sequences into the knowledge base.
    Train {
        #[command(flatten)]
        sources: Sources,
        #[arg(long, alias = "in")]
        train: PathBuf,
        #[arg(long, env = "LOGHIER_STORE")]
        store: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Detect anomalies in one sequence or a whole file.
    Detect {
        #[command(flatten)]
        sources: Sources,
        #[command(flatten)]
        options: DetectOptions,
        #[arg(long)]
        test: PathBuf,
        /// Only this sequence id.
        #[arg(long)]
        seq: Option<String>,
        /// Training sequences ingested before detection.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, env = "LOGHIER_STORE")]
        store: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Detect a labeled test file and report precision, recall, F1 and LLM usage.
    Eval {
        #[command(flatten)]
        sources: Sources,
        #[command(flatten)]
        options: DetectOptions,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, env = "LOGHIER_STORE")]
        store: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Summarize a knowledge-base store, optionally below one tree node.
    KbStats {
        #[command(flatten)]
        sources: Sources,
        #[arg(long, env = "LOGHIER_STORE")]
        store: PathBuf,
        /// Label path such as `root/block/write`.
        #[arg(long)]
        node: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "LOGHIER_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, env = "LOGHIER_STORE")]
        store: Option<PathBuf>,
        /// Preload this catalog (and build the tree when triples are available).
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long)]
        verdicts: Option<PathBuf>,
        /// Preload a training corpus named `train`.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Preload a test corpus named `test`.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Static UI assets served at `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        /// Allowed CORS origin; repeatable. Any origin when omitted.
        #[arg(long = "cors-origin")]
        cors_origins: Vec<String>,
        #[arg(long, default_value = "flag-unknown")]
        mode: LlmMode,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message);
            ExitCode::from(1)
        }
    }
}
