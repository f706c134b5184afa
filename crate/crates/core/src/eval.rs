//! Benchmark harness: loads question files, runs one evaluation setting for a
//! number of iterations, and aggregates accuracy as mean and population σ.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusionConfig, FusionError, HybridRetriever};
use crate::generation::{
    build_prompt, parse_answer, AnswerRequest, AnswerSpace, Answerer, GenerationError, GenerationParams, PromptTemplate,
};

pub const SIGMA_CONVENTION: &str = "population";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record { path: String, line: usize, message: String },
    #[error("duplicate qid {0:?}")]
    DuplicateQid(String),
    #[error("accuracy statistics need at least one value")]
    EmptyStats,
    #[error("invalid setting: {0}")]
    Setting(String),
    #[error("retrieval failed: {0}")]
    Retrieval(FusionError),
    #[error("answer generation failed: {0}")]
    Generation(GenerationError),
    #[error("evaluation interrupted ({cause}); {} iteration(s) and {} answer(s) checkpointed", checkpoint.completed.len(), checkpoint.partial.len())]
    Interrupted { cause: String, checkpoint: Box<Checkpoint> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkQuestion {
    pub qid: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    pub answer_space: AnswerSpace,
    pub gold_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_evidence: Option<String>,
}

impl BenchmarkQuestion {
    /// Question text followed by lettered options, as shown to the model.
    pub fn prompt_text(&self) -> String {
        let mut text = self.question.clone();
        for (label, option) in self.answer_space.labels.iter().zip(&self.options) {
            text.push_str(&format!("\n{label}. {option}"));
        }
        text
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionRecord {
    qid: String,
    question: String,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    options: Option<Vec<String>>,
    answer: String,
    #[serde(default)]
    evidence: Option<String>,
}

fn normalize_gold(answer: &str) -> String {
    match answer.trim().to_uppercase().as_str() {
        "TRUE" => "T".into(),
        "FALSE" => "F".into(),
        other => other.to_string(),
    }
}

pub fn parse_benchmark(content: &str, path: &str) -> Result<Vec<BenchmarkQuestion>, EvalError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Record {
            path: path.to_string(),
            line: idx + 1,
            message,
        };
        let rec: QuestionRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let options = rec.options.unwrap_or_default();
        let answer_space = match rec.kind.as_str() {
            "tf" => AnswerSpace::true_false(),
            "mcq" => {
                let n = if options.is_empty() { 4 } else { options.len() };
                if n > 26 {
                    return Err(err(format!("{n} options exceed the A-Z label range")));
                }
                AnswerSpace::multiple_choice(n)
            }
            other => {
                return Err(err(format!(
                    "unknown question type {other:?}, expected \"tf\" or \"mcq\""
                )))
            }
        };
        let gold_label = normalize_gold(&rec.answer);
        if !answer_space.contains(&gold_label) {
            return Err(err(format!(
                "answer {:?} is not one of {}",
                rec.answer,
                answer_space.describe()
            )));
        }
        if !seen.insert(rec.qid.clone()) {
            return Err(EvalError::DuplicateQid(rec.qid));
        }
        out.push(BenchmarkQuestion {
            qid: rec.qid,
            question: rec.question,
            options,
            answer_space,
            gold_label,
            gold_evidence: rec.evidence.filter(|e| !e.is_empty()),
        });
    }
    Ok(out)
}

pub fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkQuestion>, EvalError> {
    let content = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_benchmark(&content, &path.display().to_string())
}

/// Serializes questions back to the benchmark JSONL format.
pub fn benchmark_to_jsonl(questions: &[BenchmarkQuestion]) -> String {
    let mut out = String::new();
    for q in questions {
        let mut rec = serde_json::json!({
            "qid": q.qid,
            "question": q.question,
            "type": match q.answer_space.kind {
                crate::generation::AnswerKind::TrueFalse => "tf",
                crate::generation::AnswerKind::MultipleChoice => "mcq",
            },
            "answer": q.gold_label,
        });
        if !q.options.is_empty() {
            rec["options"] = serde_json::json!(q.options);
        }
        if let Some(e) = &q.gold_evidence {
            rec["evidence"] = serde_json::json!(e);
        }
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettingName {
    NoRag,
    BaselineRag,
    Hybrid,
    HybridRegex,
    PreformattedContext,
}

impl SettingName {
    pub const ALL: [SettingName; 5] = [
        Self::NoRag,
        Self::PreformattedContext,
        Self::BaselineRag,
        Self::Hybrid,
        Self::HybridRegex,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoRag => "no_rag",
            Self::BaselineRag => "baseline_rag",
            Self::Hybrid => "hybrid",
            Self::HybridRegex => "hybrid_regex",
            Self::PreformattedContext => "preformatted_context",
        }
    }

    pub fn needs_indexes(self) -> bool {
        matches!(self, Self::BaselineRag | Self::Hybrid | Self::HybridRegex)
    }
}

impl fmt::Display for SettingName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SettingName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| format!("unknown setting {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSetting {
    pub name: SettingName,
    pub fusion: Option<FusionConfig>,
    pub generation: GenerationParams,
}

impl EvalSetting {
    /// Derives the setting's retrieval config from a base fusion config.
    pub fn standard(name: SettingName, base: &FusionConfig, generation: GenerationParams) -> Self {
        let fusion = match name {
            SettingName::NoRag | SettingName::PreformattedContext => None,
            SettingName::BaselineRag => Some(FusionConfig {
                alpha: 0.0,
                regex_boost_enabled: false,
                ..*base
            }),
            SettingName::Hybrid => Some(FusionConfig {
                regex_boost_enabled: false,
                ..*base
            }),
            SettingName::HybridRegex => Some(FusionConfig {
                regex_boost_enabled: true,
                ..*base
            }),
        };
        Self {
            name,
            fusion,
            generation,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Setting(format!("{}: {m}", self.name)));
        match (self.name, &self.fusion) {
            (SettingName::NoRag | SettingName::PreformattedContext, Some(_)) => bad("takes no fusion config"),
            (SettingName::BaselineRag | SettingName::Hybrid | SettingName::HybridRegex, None) => {
                bad("requires a fusion config")
            }
            (SettingName::HybridRegex, Some(f)) if !f.regex_boost_enabled => bad("regex boost must be enabled"),
            (SettingName::BaselineRag, Some(f)) if f.alpha != 0.0 || f.regex_boost_enabled => {
                bad("baseline uses dense-only retrieval (alpha 0, no regex)")
            }
            (_, Some(f)) => f.validate().map_err(|e| EvalError::Setting(e.to_string())),
            _ => Ok(()),
        }?;
        self.generation
            .validate()
            .map_err(|e| EvalError::Setting(e.to_string()))
    }
}

/// Where a setting gets its context from.
pub enum ContextSource<'a> {
    None,
    Retrieval(HybridRetriever<'a>),
    /// qid → curated context string.
    Preformatted(&'a BTreeMap<String, String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub qid: String,
    pub raw_response: String,
    pub predicted: Option<String>,
    pub gold: String,
    pub correct: bool,
    pub parse_failure: bool,
    pub retrieved: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationResult {
    pub iteration: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub parse_failures: usize,
    pub questions: Vec<QuestionOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: SettingName,
    pub iterations: usize,
    pub seed: u64,
    pub n_questions: usize,
    pub per_iteration_accuracy: Vec<f64>,
    pub mean: f64,
    pub stddev: f64,
    pub sigma_convention: String,
    pub details: Vec<IterationResult>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

/// State saved when a live run is cut short, enough to resume it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub setting: SettingName,
    pub seed: u64,
    pub iterations: usize,
    pub completed: Vec<IterationResult>,
    /// Answers already collected for the interrupted iteration.
    pub partial: Vec<QuestionOutcome>,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub iterations: usize,
    pub seed: u64,
    pub parallelism: usize,
    pub template: PromptTemplate,
    pub resume: Option<Checkpoint>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            iterations: 10,
            seed: 0,
            parallelism: 1,
            template: PromptTemplate::default(),
            resume: None,
        }
    }
}

/// Mean and population standard deviation.
pub fn accuracy_stats(values: &[f64]) -> Result<(f64, f64), EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyStats);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

struct Prepared {
    prompt: String,
    retrieved: Vec<String>,
}

/// Runs `items` through `f` on up to `workers` threads in the given order.
/// Stops handing out work after the first error; returns the completed
/// results by position and the first error.
fn run_bounded<T, E, F>(order: &[usize], workers: usize, f: F) -> (Vec<Option<T>>, Option<E>)
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    let n = order.iter().copied().max().map_or(0, |m| m + 1);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let first_err: Mutex<Option<E>> = Mutex::new(None);
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, order.len().max(1)) {
            s.spawn(|| loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&item) = order.get(i) else { break };
                match f(item) {
                    Ok(v) => *slots[item].lock().unwrap() = Some(v),
                    Err(e) => {
                        stop.store(true, Ordering::Relaxed);
                        first_err.lock().unwrap().get_or_insert(e);
                    }
                }
            });
        }
    });
    (
        slots.into_iter().map(|m| m.into_inner().unwrap()).collect(),
        first_err.into_inner().unwrap(),
    )
}

fn is_transport(e: &GenerationError) -> bool {
    matches!(e, GenerationError::Transport(_))
}

pub fn run_setting(
    questions: &[BenchmarkQuestion],
    source: &ContextSource<'_>,
    setting: &EvalSetting,
    answerer: &dyn Answerer,
    opts: &RunOptions,
) -> Result<EvalReport, EvalError> {
    setting.validate()?;
    if opts.iterations == 0 {
        return Err(EvalError::Setting("iterations must be >= 1".into()));
    }
    let mut completed = Vec::new();
    let mut partial: BTreeMap<String, QuestionOutcome> = BTreeMap::new();
    if let Some(cp) = &opts.resume {
        if cp.setting != setting.name || cp.seed != opts.seed || cp.iterations != opts.iterations {
            return Err(EvalError::Setting(format!(
                "checkpoint is for {} (seed {}, {} iterations), not {} (seed {}, {} iterations)",
                cp.setting, cp.seed, cp.iterations, setting.name, opts.seed, opts.iterations
            )));
        }
        completed = cp.completed.clone();
        partial = cp.partial.iter().map(|o| (o.qid.clone(), o.clone())).collect();
    }
    let interrupted =
        |cause: String, completed: &[IterationResult], partial: Vec<QuestionOutcome>| EvalError::Interrupted {
            cause,
            checkpoint: Box::new(Checkpoint {
                setting: setting.name,
                seed: opts.seed,
                iterations: opts.iterations,
                completed: completed.to_vec(),
                partial,
            }),
        };

    // Retrieval is deterministic, so prompts are built once and reused by every iteration.
    let all: Vec<usize> = (0..questions.len()).collect();
    let (prepared, err) = run_bounded(&all, opts.parallelism, |i| {
        prepare(&questions[i], source, setting, &opts.template)
    });
    if let Some(e) = err {
        let transport = matches!(&e, FusionError::Dense(crate::dense::DenseError::Transport(_)));
        return Err(if transport {
            interrupted(e.to_string(), &completed, partial.into_values().collect())
        } else {
            EvalError::Retrieval(e)
        });
    }
    let prepared: Vec<Prepared> = prepared.into_iter().map(|p| p.expect("prepared")).collect();

    for iteration in completed.len()..opts.iterations {
        let mut order: Vec<usize> = (0..questions.len())
            .filter(|&i| !partial.contains_key(&questions[i].qid))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(iteration as u64));
        order.shuffle(&mut rng);

        let (answers, err) = run_bounded(&order, opts.parallelism, |i| {
            let q = &questions[i];
            let raw = answerer.answer(&AnswerRequest {
                prompt: &prepared[i].prompt,
                space: &q.answer_space,
                gold_label: Some(&q.gold_label),
                gold_evidence: q.gold_evidence.as_deref(),
            })?;
            let predicted = parse_answer(&raw, &q.answer_space).label().map(str::to_string);
            Ok::<_, GenerationError>(QuestionOutcome {
                qid: q.qid.clone(),
                correct: predicted.as_deref() == Some(q.gold_label.as_str()),
                parse_failure: predicted.is_none(),
                predicted,
                raw_response: raw,
                gold: q.gold_label.clone(),
                retrieved: prepared[i].retrieved.clone(),
            })
        });
        for outcome in answers.into_iter().flatten() {
            partial.insert(outcome.qid.clone(), outcome);
        }
        if let Some(e) = err {
            if is_transport(&e) {
                let saved = questions.iter().filter_map(|q| partial.get(&q.qid).cloned()).collect();
                return Err(interrupted(e.to_string(), &completed, saved));
            }
            return Err(EvalError::Generation(e));
        }

        let outcomes: Vec<QuestionOutcome> = questions
            .iter()
            .map(|q| partial.remove(&q.qid).expect("every question answered"))
            .collect();
        let correct = outcomes.iter().filter(|o| o.correct).count();
        let parse_failures = outcomes.iter().filter(|o| o.parse_failure).count();
        completed.push(IterationResult {
            iteration,
            accuracy: if questions.is_empty() {
                0.0
            } else {
                correct as f64 / questions.len() as f64
            },
            correct,
            parse_failures,
            questions: outcomes,
        });
        partial.clear();
    }

    let per_iteration_accuracy: Vec<f64> = completed.iter().map(|r| r.accuracy).collect();
    let (mean, stddev) = accuracy_stats(&per_iteration_accuracy)?;
    Ok(EvalReport {
        setting: setting.name,
        iterations: opts.iterations,
        seed: opts.seed,
        n_questions: questions.len(),
        per_iteration_accuracy,
        mean,
        stddev,
        sigma_convention: SIGMA_CONVENTION.into(),
        details: completed,
        config: serde_json::Value::Null,
    })
}

fn prepare(
    q: &BenchmarkQuestion,
    source: &ContextSource<'_>,
    setting: &EvalSetting,
    template: &PromptTemplate,
) -> Result<Prepared, FusionError> {
    let template = template.for_space(&q.answer_space);
    let question = q.prompt_text();
    let (contexts, retrieved): (Vec<String>, Vec<String>) = match (source, &setting.fusion, setting.name) {
        (_, _, SettingName::NoRag) => (Vec::new(), Vec::new()),
        (ContextSource::Preformatted(map), _, SettingName::PreformattedContext) => match map.get(&q.qid) {
            Some(ctx) => (vec![ctx.clone()], Vec::new()),
            None => (Vec::new(), Vec::new()),
        },
        (ContextSource::Retrieval(r), Some(cfg), name) => {
            let hits = if name == SettingName::BaselineRag {
                r.retrieve_dense_only(&q.question, cfg)?
            } else {
                r.retrieve(&q.question, cfg)?
            };
            hits.into_iter().map(|h| (h.chunk.text, h.chunk.chunk_id)).unzip()
        }
        _ => {
            return Err(FusionError::Config(format!(
                "setting {} has no matching context source",
                setting.name
            )))
        }
    };
    let refs: Vec<&str> = contexts.iter().map(String::as_str).collect();
    Ok(Prepared {
        prompt: build_prompt(&question, &refs, &template),
        retrieved,
    })
}

/// Human-readable summary table.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:<22} {:>10} {:>10} {:>10} {:>6}\n",
        "setting", "mean(%)", "sigma(%)", "questions", "iters"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<22} {:>10.2} {:>10.2} {:>10} {:>6}\n",
            r.setting.as_str(),
            100.0 * r.mean,
            100.0 * r.stddev,
            r.n_questions,
            r.iterations
        ));
    }
    out.push_str(&format!(
        "(sigma: {SIGMA_CONVENTION} standard deviation over iterations)\n"
    ));
    out
}
