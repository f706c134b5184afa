//! `cti-rag` command line: ingest, index, query, eval.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{chunk_corpus, load_corpus, Chunk, ChunkerConfig, CorpusError, CorpusFormat};
use crate::dense::{DenseError, DenseIndex, EmbedderSpec};
use crate::eval::{
    load_benchmark, render_table, run_setting, Checkpoint, ContextSource, EvalError, EvalReport, EvalSetting,
    RunOptions, SettingName,
};
use crate::fusion::{ChunkStore, FusionConfig, FusionError, HybridRetriever};
use crate::generation::{
    answerer_for, build_prompt, parse_answer, AnswerRequest, AnswerSpace, GenerationError, GenerationParams,
    PromptTemplate,
};
use crate::sparse::{Bm25Params, SparseError, SparseIndex};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Transport(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Io(_) => 2,
            Self::Transport(_) => 3,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Config(_) => Self::Usage(e.to_string()),
            _ => Self::Io(e.to_string()),
        }
    }
}

impl From<SparseError> for CliError {
    fn from(e: SparseError) -> Self {
        match e {
            SparseError::Io { .. } | SparseError::Format { .. } | SparseError::Version(_) => Self::Io(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<DenseError> for CliError {
    fn from(e: DenseError) -> Self {
        match e {
            DenseError::Transport(_) => Self::Transport(e.to_string()),
            DenseError::Persist { .. } | DenseError::Version(_) => Self::Io(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Dense(d) => d.into(),
            other => Self::Usage(other.to_string()),
        }
    }
}

impl From<GenerationError> for CliError {
    fn from(e: GenerationError) -> Self {
        match e {
            GenerationError::Transport(_) => Self::Transport(e.to_string()),
            other => Self::Usage(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } | EvalError::Record { .. } | EvalError::DuplicateQid(_) => Self::Io(e.to_string()),
            EvalError::Retrieval(f) => f.into(),
            EvalError::Generation(g) => g.into(),
            EvalError::Interrupted { .. } => Self::Transport(e.to_string()),
            other => Self::Usage(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub chunk_store: PathBuf,
    pub sparse_index: PathBuf,
    pub dense_index: PathBuf,
    pub benchmark: Option<PathBuf>,
    pub preformatted_context: Option<PathBuf>,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            chunk_store: "data/chunks.jsonl".into(),
            sparse_index: "data/sparse_index.json".into(),
            dense_index: "data/dense_index.json".into(),
            benchmark: None,
            preformatted_context: None,
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub format: CorpusFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub settings: Vec<SettingName>,
    pub iterations: usize,
    pub parallelism: usize,
    pub resume: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            settings: vec![SettingName::HybridRegex],
            iterations: 10,
            parallelism: 1,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct QueryConfig {
    pub show_scores: bool,
    pub ask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub chunker: ChunkerConfig,
    pub bm25: Bm25Params,
    pub embedder: EmbedderSpec,
    pub fusion: FusionConfig,
    pub generation: GenerationParams,
    pub prompt: PromptTemplate,
    pub eval: EvalConfig,
    pub query: QueryConfig,
}

impl AppConfig {
    /// Parses a TOML config. Relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.chunk_store);
        fix(&mut paths.sparse_index);
        fix(&mut paths.dense_index);
        fix(&mut paths.report_dir);
        for p in [&mut paths.corpus, &mut paths.benchmark, &mut paths.preformatted_context]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: &dyn std::fmt::Display| CliError::Usage(format!("config: {e}"));
        self.chunker.validate().map_err(|e| usage(&e))?;
        self.bm25.validate().map_err(|e| usage(&e))?;
        self.embedder.validate().map_err(|e| usage(&e))?;
        self.fusion.validate().map_err(|e| usage(&e))?;
        self.generation.validate().map_err(|e| usage(&e))?;
        if self.eval.iterations == 0 {
            return Err(usage(&"eval.iterations must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cti-rag",
    version,
    about = "Hybrid BM25 + dense retrieval and RAG evaluation for CVE/CWE corpora"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for all harness randomness (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a corpus and write the chunk store.
    Ingest {
        /// Corpus directory or JSONL file (overrides `paths.corpus`).
        corpus: Option<PathBuf>,
        /// plain_text_dir, jsonl or pdf_extracted_text (overrides `corpus.format`).
        #[arg(long)]
        format: Option<CorpusFormat>,
    },
    /// Build the sparse and dense indexes from the chunk store.
    Index,
    /// Retrieve the top chunks for a query.
    Query {
        text: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long = "k-final")]
        k_final: Option<usize>,
        #[arg(long = "no-regex")]
        no_regex: bool,
        #[arg(long = "show-scores")]
        show_scores: bool,
        /// Also send the retrieved context and query to the chat endpoint.
        #[arg(long)]
        ask: bool,
    },
    /// Run benchmark settings and write reports.
    Eval {
        /// Benchmark JSONL (overrides `paths.benchmark`).
        benchmark: Option<PathBuf>,
        /// Repeatable; overrides `eval.settings`.
        #[arg(long = "setting")]
        settings: Vec<SettingName>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Use the deterministic mock answerer (overrides `generation.mock_mode`).
        #[arg(long)]
        mock: bool,
        /// Continue from a checkpoint left by an interrupted run.
        #[arg(long)]
        resume: bool,
    },
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = write!(err, "{e}");
            return code;
        }
    };
    match run(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Ingest { corpus, format } => {
            if let Some(p) = corpus {
                cfg.paths.corpus = Some(p);
            }
            if let Some(f) = format {
                cfg.corpus.format = f;
            }
            cmd_ingest(&cfg, out, err)
        }
        Command::Index => cmd_index(&cfg, out),
        Command::Query {
            text,
            alpha,
            k_final,
            no_regex,
            show_scores,
            ask,
        } => {
            if let Some(a) = alpha {
                cfg.fusion.alpha = a;
            }
            if let Some(k) = k_final {
                cfg.fusion.k_final = k;
            }
            if no_regex {
                cfg.fusion.regex_boost_enabled = false;
            }
            cfg.query.show_scores |= show_scores;
            cfg.query.ask |= ask;
            cfg.validate()?;
            cmd_query(&cfg, &text, out)
        }
        Command::Eval {
            benchmark,
            settings,
            iterations,
            mock,
            resume,
        } => {
            if let Some(b) = benchmark {
                cfg.paths.benchmark = Some(b);
            }
            if !settings.is_empty() {
                cfg.eval.settings = settings;
            }
            if let Some(n) = iterations {
                cfg.eval.iterations = n;
            }
            cfg.generation.mock_mode |= mock;
            cfg.eval.resume |= resume;
            cfg.validate()?;
            cmd_eval(&cfg, out, err)
        }
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    Ok(())
}

pub fn write_chunk_store(path: &Path, chunks: &[Chunk]) -> Result<(), CliError> {
    ensure_parent(path)?;
    let mut buf = String::new();
    for c in chunks {
        buf.push_str(&serde_json::to_string(c).map_err(|e| io_error(path, e))?);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| io_error(path, e))
}

pub fn read_chunk_store(path: &Path) -> Result<Vec<Chunk>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Io(format!(
            "chunk store {} not readable ({e}); run `cti-rag ingest` first",
            path.display()
        ))
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Io(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn cmd_ingest(cfg: &AppConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let corpus_path = cfg
        .paths
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::Usage("no corpus path given (argument or paths.corpus)".into()))?;
    let corpus = load_corpus(corpus_path, cfg.corpus.format)?;
    let chunks = chunk_corpus(&corpus.documents, &cfg.chunker)?;
    write_chunk_store(&cfg.paths.chunk_store, &chunks)?;
    if corpus.skipped > 0 {
        let _ = writeln!(err, "warning: skipped {} record(s) with empty text", corpus.skipped);
    }
    if corpus.documents.is_empty() {
        let _ = writeln!(err, "warning: corpus {} contains no documents", corpus_path.display());
    }
    let _ = writeln!(
        out,
        "documents: {}\nchunks: {}\nskipped: {}\nchunk store: {}",
        corpus.documents.len(),
        chunks.len(),
        corpus.skipped,
        cfg.paths.chunk_store.display()
    );
    Ok(())
}

pub fn cmd_index(cfg: &AppConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let chunks = read_chunk_store(&cfg.paths.chunk_store)?;
    if cfg.paths.dense_index.exists() {
        let existing = DenseIndex::load(&cfg.paths.dense_index)?;
        if existing.dim != cfg.embedder.dim {
            return Err(CliError::Usage(format!(
                "stored dense index {} has dim {} but the configured embedder has dim {}; remove the index to rebuild it",
                cfg.paths.dense_index.display(),
                existing.dim,
                cfg.embedder.dim
            )));
        }
    }
    let sparse = SparseIndex::build(&chunks, cfg.bm25)?;
    let embedder = cfg.embedder.build()?;
    let dense = DenseIndex::build(
        embedder.as_ref(),
        chunks.iter().map(|c| (c.chunk_id.as_str(), c.text.as_str())),
    )?;
    ensure_parent(&cfg.paths.sparse_index)?;
    ensure_parent(&cfg.paths.dense_index)?;
    sparse.save(&cfg.paths.sparse_index)?;
    dense.save(&cfg.paths.dense_index)?;
    let _ = writeln!(
        out,
        "sparse index: {} chunks, {} terms, avgdl {:.3} -> {}\ndense index: {} chunks, dim {} ({}) -> {}",
        sparse.n_docs,
        sparse.postings.len(),
        sparse.avgdl,
        cfg.paths.sparse_index.display(),
        dense.len(),
        dense.dim,
        dense.embedder,
        cfg.paths.dense_index.display()
    );
    Ok(())
}

struct LoadedIndexes {
    store: ChunkStore,
    sparse: SparseIndex,
    dense: DenseIndex,
    embedder: Box<dyn crate::dense::Embedder>,
}

fn load_indexes(cfg: &AppConfig) -> Result<LoadedIndexes, CliError> {
    for (what, path) in [
        ("sparse index", &cfg.paths.sparse_index),
        ("dense index", &cfg.paths.dense_index),
        ("chunk store", &cfg.paths.chunk_store),
    ] {
        if !path.exists() {
            return Err(CliError::Io(format!(
                "missing {what} {}; run `cti-rag ingest` and `cti-rag index` first",
                path.display()
            )));
        }
    }
    let store = ChunkStore::new(read_chunk_store(&cfg.paths.chunk_store)?);
    let sparse = SparseIndex::load(&cfg.paths.sparse_index)?;
    let dense = DenseIndex::load(&cfg.paths.dense_index)?;
    let embedder = cfg.embedder.build()?;
    if dense.dim != embedder.dim() {
        return Err(CliError::Usage(format!(
            "dense index {} has dim {} but the configured embedder has dim {}",
            cfg.paths.dense_index.display(),
            dense.dim,
            embedder.dim()
        )));
    }
    Ok(LoadedIndexes {
        store,
        sparse,
        dense,
        embedder,
    })
}

impl LoadedIndexes {
    fn retriever<'a>(&'a self, cfg: &'a AppConfig) -> HybridRetriever<'a> {
        HybridRetriever {
            chunks: &self.store,
            sparse: &self.sparse,
            dense: &self.dense,
            embedder: self.embedder.as_ref(),
            query_prefix: &cfg.embedder.query_prefix,
        }
    }
}

pub fn cmd_query(cfg: &AppConfig, query: &str, out: &mut dyn Write) -> Result<(), CliError> {
    let loaded = load_indexes(cfg)?;
    let hits = loaded.retriever(cfg).retrieve(query, &cfg.fusion)?;
    if cfg.query.show_scores {
        let _ = writeln!(
            out,
            "alpha={} regex_boost={}",
            cfg.fusion.alpha, cfg.fusion.regex_boost_enabled
        );
        let _ = writeln!(
            out,
            "{:<4} {:<32} {:>10} {:>10} {:>8} {:>10}",
            "rank", "chunk_id", "sparse", "dense", "boost", "fused"
        );
    }
    for (rank, hit) in hits.iter().enumerate() {
        let s = &hit.scores;
        if cfg.query.show_scores {
            let _ = writeln!(
                out,
                "{:<4} {:<32} {:>10.6} {:>10.6} {:>8.6} {:>10.6}",
                rank + 1,
                s.chunk_id,
                s.sparse_score_norm,
                s.dense_score,
                s.boost,
                s.fused_score
            );
        } else {
            let _ = writeln!(out, "{}. {} (score {:.4})", rank + 1, s.chunk_id, s.fused_score);
        }
        let _ = writeln!(out, "    {}", hit.chunk.text.replace('\n', " "));
    }
    if cfg.query.ask {
        let space = AnswerSpace::true_false();
        let template = cfg.prompt.for_space(&space);
        let contexts: Vec<&str> = hits.iter().map(|h| h.chunk.text.as_str()).collect();
        let prompt = build_prompt(query, &contexts, &template);
        let answerer = answerer_for(&cfg.generation)?;
        let raw = answerer.answer(&AnswerRequest {
            prompt: &prompt,
            space: &space,
            gold_label: None,
            gold_evidence: None,
        })?;
        let parsed = parse_answer(&raw, &space);
        let _ = writeln!(
            out,
            "answer: {} (raw {:?})",
            parsed.label().unwrap_or("<unparseable>"),
            raw
        );
    }
    Ok(())
}

fn checkpoint_path(cfg: &AppConfig, setting: SettingName) -> PathBuf {
    cfg.paths.report_dir.join(format!("{setting}.checkpoint.json"))
}

pub fn report_path(cfg: &AppConfig, setting: SettingName) -> PathBuf {
    cfg.paths.report_dir.join(format!("{setting}.json"))
}

pub fn cmd_eval(cfg: &AppConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let bench_path = cfg
        .paths
        .benchmark
        .as_ref()
        .ok_or_else(|| CliError::Usage("no benchmark given (argument or paths.benchmark)".into()))?;
    let questions = load_benchmark(bench_path)?;
    let needs_indexes = cfg.eval.settings.iter().any(|s| s.needs_indexes());
    let indexes = if needs_indexes { Some(load_indexes(cfg)?) } else { None };
    let preformatted: Option<BTreeMap<String, String>> =
        if cfg.eval.settings.contains(&SettingName::PreformattedContext) {
            let path = cfg.paths.preformatted_context.as_ref().ok_or_else(|| {
                CliError::Usage("preformatted_context setting needs paths.preformatted_context".into())
            })?;
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| io_error(path, e))?)
        } else {
            None
        };
    let answerer = answerer_for(&cfg.generation)?;
    fs::create_dir_all(&cfg.paths.report_dir).map_err(|e| io_error(&cfg.paths.report_dir, e))?;
    let config_echo = serde_json::to_value(cfg).map_err(|e| CliError::Usage(e.to_string()))?;

    let mut reports = Vec::new();
    for &name in &cfg.eval.settings {
        let setting = EvalSetting::standard(name, &cfg.fusion, cfg.generation.clone());
        let source = match name {
            SettingName::NoRag => ContextSource::None,
            SettingName::PreformattedContext => ContextSource::Preformatted(preformatted.as_ref().expect("loaded")),
            _ => ContextSource::Retrieval(indexes.as_ref().expect("loaded").retriever(cfg)),
        };
        let cp_path = checkpoint_path(cfg, name);
        let resume = if cfg.eval.resume && cp_path.exists() {
            let text = fs::read_to_string(&cp_path).map_err(|e| io_error(&cp_path, e))?;
            Some(serde_json::from_str::<Checkpoint>(&text).map_err(|e| io_error(&cp_path, e))?)
        } else {
            None
        };
        let opts = RunOptions {
            iterations: cfg.eval.iterations,
            seed: cfg.seed,
            parallelism: cfg.eval.parallelism,
            template: cfg.prompt.clone(),
            resume,
        };
        match run_setting(&questions, &source, &setting, answerer.as_ref(), &opts) {
            Ok(mut report) => {
                report.config = config_echo.clone();
                write_report(&report_path(cfg, name), &report)?;
                if cp_path.exists() {
                    fs::remove_file(&cp_path).map_err(|e| io_error(&cp_path, e))?;
                }
                reports.push(report);
            }
            Err(EvalError::Interrupted { cause, checkpoint }) => {
                let json = serde_json::to_string_pretty(&checkpoint).map_err(|e| io_error(&cp_path, e))?;
                fs::write(&cp_path, json).map_err(|e| io_error(&cp_path, e))?;
                let _ = writeln!(
                    err,
                    "checkpoint written to {}; rerun with --resume to continue",
                    cp_path.display()
                );
                return Err(CliError::Transport(format!("{name}: {cause}")));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let _ = write!(out, "{}", render_table(&reports));
    Ok(())
}

fn write_report(path: &Path, report: &EvalReport) -> Result<(), CliError> {
    let mut json = serde_json::to_string_pretty(report).map_err(|e| io_error(path, e))?;
    json.push('\n');
    fs::write(path, json).map_err(|e| io_error(path, e))
}
