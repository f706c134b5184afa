//! Corpus loading and recursive character chunking.
//!
//! Chunks are contiguous spans of their parent document. Every chunk after the
//! first starts with up to `overlap` characters copied from the end of the
//! previous span, so dropping each chunk's leading overlap and concatenating
//! reproduces the document exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("invalid chunker config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// A retrievable span of a source document. Offsets count Unicode scalar
/// values, `char_end` is exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

impl Chunk {
    pub fn char_len(&self) -> usize {
        self.char_end - self.char_start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChunkerConfig {
    pub chunk_size: usize,
    pub overlap: usize,
    pub separators: Vec<String>,
}

impl Default for ChunkerConfig {
    fn default() -> Self {
        Self {
            chunk_size: 512,
            overlap: 20,
            separators: vec!["\n\n".into(), "\n".into(), ". ".into(), " ".into(), String::new()],
        }
    }
}

impl ChunkerConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.chunk_size == 0 {
            return Err(CorpusError::Config("chunk_size must be positive".into()));
        }
        if self.overlap >= self.chunk_size {
            return Err(CorpusError::Config(format!(
                "overlap ({}) must be smaller than chunk_size ({})",
                self.overlap, self.chunk_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    #[default]
    PlainTextDir,
    Jsonl,
    /// Text already extracted from PDFs, one file per document.
    PdfExtractedText,
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain_text_dir" => Ok(Self::PlainTextDir),
            "jsonl" => Ok(Self::Jsonl),
            "pdf_extracted_text" => Ok(Self::PdfExtractedText),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub documents: Vec<SourceDocument>,
    /// Records or files dropped because their text was empty.
    pub skipped: usize,
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: String,
    description: String,
    #[serde(default)]
    metadata: Option<serde_json::Map<String, serde_json::Value>>,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<LoadedCorpus, CorpusError> {
    let corpus = match format {
        CorpusFormat::Jsonl => load_jsonl(path)?,
        CorpusFormat::PlainTextDir | CorpusFormat::PdfExtractedText => load_text_dir(path)?,
    };
    let mut seen = std::collections::HashSet::new();
    for doc in &corpus.documents {
        if !seen.insert(doc.doc_id.as_str()) {
            return Err(CorpusError::DuplicateId(doc.doc_id.clone()));
        }
    }
    Ok(corpus)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_text_dir(dir: &Path) -> Result<LoadedCorpus, CorpusError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if entry.file_type().map_err(io_err(&path))?.is_file() {
            files.push(path);
        }
    }
    files.sort();

    let mut out = LoadedCorpus::default();
    for path in files {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        if text.trim().is_empty() {
            out.skipped += 1;
            continue;
        }
        let doc_id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut metadata = BTreeMap::new();
        metadata.insert("source_path".to_string(), path.display().to_string());
        out.documents.push(SourceDocument { doc_id, text, metadata });
    }
    Ok(out)
}

fn load_jsonl(path: &Path) -> Result<LoadedCorpus, CorpusError> {
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = LoadedCorpus::default();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(line).map_err(|e| CorpusError::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if record.description.trim().is_empty() {
            out.skipped += 1;
            continue;
        }
        let metadata = record
            .metadata
            .unwrap_or_default()
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                (k, v)
            })
            .collect();
        out.documents.push(SourceDocument {
            doc_id: record.id,
            text: record.description,
            metadata,
        });
    }
    Ok(out)
}

/// Splits a document into chunks. Returns an empty list for empty text.
pub fn chunk_document(doc: &SourceDocument, cfg: &ChunkerConfig) -> Result<Vec<Chunk>, CorpusError> {
    cfg.validate()?;
    let chars: Vec<char> = doc.text.chars().collect();
    if chars.is_empty() {
        return Ok(Vec::new());
    }
    let separators: Vec<Vec<char>> = cfg.separators.iter().map(|s| s.chars().collect()).collect();
    // Base spans leave room for the overlap prefix so every chunk stays within chunk_size.
    let budget = cfg.chunk_size - cfg.overlap;
    let mut spans = Vec::new();
    split_span(&chars, 0, chars.len(), &separators, budget, &mut spans);
    let spans = merge_spans(spans, budget);

    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(ordinal, (start, end))| {
            let lead = if ordinal == 0 { 0 } else { cfg.overlap.min(start) };
            let char_start = start - lead;
            Chunk {
                chunk_id: chunk_id(&doc.doc_id, ordinal),
                doc_id: doc.doc_id.clone(),
                text: chars[char_start..end].iter().collect(),
                char_start,
                char_end: end,
            }
        })
        .collect())
}

pub fn chunk_corpus(docs: &[SourceDocument], cfg: &ChunkerConfig) -> Result<Vec<Chunk>, CorpusError> {
    let mut out = Vec::new();
    for doc in docs {
        out.extend(chunk_document(doc, cfg)?);
    }
    Ok(out)
}

fn chunk_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}#{ordinal:04}")
}

/// Recursively splits `chars[start..end]` into contiguous spans no longer than
/// `budget`, trying separators in order. Separators stay attached to the
/// fragment they terminate.
fn split_span(
    chars: &[char],
    start: usize,
    end: usize,
    separators: &[Vec<char>],
    budget: usize,
    out: &mut Vec<(usize, usize)>,
) {
    if end - start <= budget {
        out.push((start, end));
        return;
    }
    let Some(pos) = separators
        .iter()
        .position(|sep| sep.is_empty() || contains(&chars[start..end], sep))
    else {
        hard_split(start, end, budget, out);
        return;
    };
    let sep = &separators[pos];
    if sep.is_empty() {
        hard_split(start, end, budget, out);
        return;
    }
    let rest = &separators[pos + 1..];
    let mut frag_start = start;
    let mut i = start;
    while i + sep.len() <= end {
        if chars[i..i + sep.len()] == sep[..] {
            i += sep.len();
            split_span(chars, frag_start, i, rest, budget, out);
            frag_start = i;
        } else {
            i += 1;
        }
    }
    if frag_start < end {
        split_span(chars, frag_start, end, rest, budget, out);
    }
}

fn hard_split(start: usize, end: usize, budget: usize, out: &mut Vec<(usize, usize)>) {
    let mut s = start;
    while s < end {
        let e = (s + budget).min(end);
        out.push((s, e));
        s = e;
    }
}

fn contains(haystack: &[char], needle: &[char]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Greedily joins adjacent spans while the result fits in `budget`.
fn merge_spans(spans: Vec<(usize, usize)>, budget: usize) -> Vec<(usize, usize)> {
    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        match merged.last_mut() {
            Some(last) if e - last.0 <= budget => last.1 = e,
            _ => merged.push((s, e)),
        }
    }
    merged
}
