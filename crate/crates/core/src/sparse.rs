//! Tokenization and Okapi BM25 over an inverted index of chunks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Chunk;

pub const SPARSE_INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("chunk {0:?} is not in the sparse index")]
    UnknownChunk(String),
    #[error("duplicate chunk id {0:?}")]
    DuplicateChunk(String),
    #[error("invalid BM25 parameters: {0}")]
    Params(String),
    #[error("unsupported sparse index version {0}")]
    Version(u32),
    #[error("sparse index {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("sparse index {path}: {source}")]
    Format {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Lowercased whitespace tokens with leading/trailing punctuation removed.
/// Hyphens are kept so identifiers like `cve-2024-5022` survive intact.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenList(pub Vec<String>);

impl TokenList {
    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn tokenize(text: &str) -> TokenList {
    let strip = |c: char| !c.is_alphanumeric() && c != '-';
    TokenList(
        text.split_whitespace()
            .map(|raw| raw.trim_matches(strip).to_lowercase())
            .filter(|t| !t.is_empty())
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), SparseError> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(SparseError::Params(format!("k1 must be > 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(SparseError::Params(format!("b must be in [0,1], got {}", self.b)));
        }
        Ok(())
    }
}

/// Inverted index. Posting lists are sorted by chunk id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseIndex {
    pub version: u32,
    pub params: Bm25Params,
    pub n_docs: usize,
    pub avgdl: f64,
    pub doc_lengths: BTreeMap<String, u32>,
    pub postings: BTreeMap<String, Vec<(String, u32)>>,
}

impl SparseIndex {
    pub fn build(chunks: &[Chunk], params: Bm25Params) -> Result<Self, SparseError> {
        params.validate()?;
        let mut doc_lengths = BTreeMap::new();
        let mut postings: BTreeMap<String, Vec<(String, u32)>> = BTreeMap::new();
        for chunk in chunks {
            let tokens = tokenize(&chunk.text);
            if doc_lengths
                .insert(chunk.chunk_id.clone(), tokens.len() as u32)
                .is_some()
            {
                return Err(SparseError::DuplicateChunk(chunk.chunk_id.clone()));
            }
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens.0 {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((chunk.chunk_id.clone(), count));
            }
        }
        for list in postings.values_mut() {
            list.sort_by(|a, b| a.0.cmp(&b.0));
        }
        let n_docs = doc_lengths.len();
        let avgdl = if n_docs == 0 {
            0.0
        } else {
            doc_lengths.values().map(|&l| l as f64).sum::<f64>() / n_docs as f64
        };
        Ok(Self {
            version: SPARSE_INDEX_VERSION,
            params,
            n_docs,
            avgdl,
            doc_lengths,
            postings,
        })
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn term_freq(&self, term: &str, chunk_id: &str) -> u32 {
        self.postings
            .get(term)
            .and_then(|list| {
                list.binary_search_by(|(id, _)| id.as_str().cmp(chunk_id))
                    .ok()
                    .map(|i| list[i].1)
            })
            .unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc_len: u32) -> f64 {
        if tf == 0 {
            return 0.0;
        }
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let len_ratio = if self.avgdl > 0.0 {
            doc_len as f64 / self.avgdl
        } else {
            0.0
        };
        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len_ratio))
    }

    /// BM25 score of one chunk. Repeated query terms count once per occurrence.
    pub fn score(&self, query: &TokenList, chunk_id: &str) -> Result<f64, SparseError> {
        let &doc_len = self
            .doc_lengths
            .get(chunk_id)
            .ok_or_else(|| SparseError::UnknownChunk(chunk_id.to_string()))?;
        Ok(query
            .iter()
            .map(|term| self.term_weight(self.idf(term), self.term_freq(term, chunk_id), doc_len))
            .sum())
    }

    /// Highest-scoring chunks, descending, ties by ascending chunk id.
    /// Chunks sharing no term with the query are never returned.
    pub fn top_k(&self, query: &TokenList, k: usize) -> Vec<(String, f64)> {
        let mut acc: HashMap<&str, f64> = HashMap::new();
        for term in query.iter() {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for (id, tf) in list {
                let w = self.term_weight(idf, *tf, self.doc_lengths[id]);
                *acc.entry(id.as_str()).or_default() += w;
            }
        }
        let mut scored: Vec<(String, f64)> = acc
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(id, s)| (id.to_string(), s))
            .collect();
        sort_desc_by_score(&mut scored);
        scored.truncate(k);
        scored
    }

    pub fn save(&self, path: &Path) -> Result<(), SparseError> {
        let json = serde_json::to_vec(self).map_err(|source| SparseError::Format {
            path: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, json).map_err(|source| SparseError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SparseError> {
        let bytes = std::fs::read(path).map_err(|source| SparseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&bytes).map_err(|e| match e {
            SparseError::Format { source, .. } => SparseError::Format {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, SparseError> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let fmt = |source| SparseError::Format {
            path: String::new(),
            source,
        };
        let header: Header = serde_json::from_slice(bytes).map_err(fmt)?;
        if header.version != SPARSE_INDEX_VERSION {
            return Err(SparseError::Version(header.version));
        }
        let index: Self = serde_json::from_slice(bytes).map_err(fmt)?;
        index.params.validate()?;
        if index.n_docs != index.doc_lengths.len() {
            return Err(SparseError::Params(format!(
                "n_docs {} disagrees with {} stored lengths",
                index.n_docs,
                index.doc_lengths.len()
            )));
        }
        for list in index.postings.values() {
            if let Some((id, _)) = list.iter().find(|(id, _)| !index.doc_lengths.contains_key(id)) {
                return Err(SparseError::UnknownChunk(id.clone()));
            }
        }
        Ok(index)
    }
}

pub fn build_sparse_index(chunks: &[Chunk], params: Bm25Params) -> Result<SparseIndex, SparseError> {
    SparseIndex::build(chunks, params)
}

pub fn bm25_score(index: &SparseIndex, query: &TokenList, chunk_id: &str) -> Result<f64, SparseError> {
    index.score(query, chunk_id)
}

pub fn sparse_top_k(index: &SparseIndex, query: &TokenList, k_sparse: usize) -> Vec<(String, f64)> {
    index.top_k(query, k_sparse)
}

pub(crate) fn sort_desc_by_score(items: &mut [(String, f64)]) {
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}
