//! Hybrid sparse/dense score fusion and CVE-identifier boosting.
//!
//! Sparse BM25 scores are min-max normalized over the sparse candidate list,
//! dense scores are used as-is (already in `[0, 1]`), and the two are combined
//! as `alpha * sparse + (1 - alpha) * dense`. Chunks whose text contains a CVE
//! id named in the query then receive a flat boost.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Chunk;
use crate::dense::{DenseError, DenseIndex, Embedder};
use crate::sparse::{tokenize, SparseIndex};

pub const CVE_PATTERN: &str = r"CVE-[0-9]{4}-[0-9]{4,6}";

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("cannot normalize an empty score list")]
    EmptyScores,
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error(transparent)]
    Dense(#[from] DenseError),
    #[error("chunk {0:?} is indexed but missing from the chunk store")]
    MissingChunk(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub alpha: f64,
    pub k_sparse: usize,
    pub k_dense: usize,
    pub k_final: usize,
    pub regex_boost_enabled: bool,
    pub boost_value: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            k_sparse: 10,
            k_dense: 10,
            k_final: 3,
            regex_boost_enabled: true,
            boost_value: 1.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(FusionError::Config(format!(
                "alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        if self.k_sparse == 0 || self.k_dense == 0 || self.k_final == 0 {
            return Err(FusionError::Config("k_sparse, k_dense and k_final must be >= 1".into()));
        }
        if !(self.boost_value.is_finite() && self.boost_value >= 0.0) {
            return Err(FusionError::Config(format!(
                "boost_value must be finite and non-negative, got {}",
                self.boost_value
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk_id: String,
    pub sparse_score_norm: f64,
    pub dense_score: f64,
    pub boost: f64,
    pub fused_score: f64,
}

impl ScoredChunk {
    fn recompute(&mut self, alpha: f64) {
        self.fused_score = alpha * self.sparse_score_norm + (1.0 - alpha) * self.dense_score + self.boost;
    }
}

/// `(s - min) / (max - min)`; every element maps to 1.0 when all are equal.
pub fn min_max_normalize(scores: &[f64]) -> Result<Vec<f64>, FusionError> {
    if scores.is_empty() {
        return Err(FusionError::EmptyScores);
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(FusionError::NonFinite(bad));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range == 0.0 {
        return Ok(vec![1.0; scores.len()]);
    }
    Ok(scores.iter().map(|s| ((s - min) / range).clamp(0.0, 1.0)).collect())
}

fn cve_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(CVE_PATTERN).expect("valid CVE pattern"))
}

/// Non-overlapping, case-sensitive CVE id matches in order of appearance.
/// A match directly followed by another digit (a 7+ digit suffix) is rejected.
pub fn extract_cve_ids(text: &str) -> Vec<String> {
    cve_regex()
        .find_iter(text)
        .filter(|m| !text[m.end()..].starts_with(|c: char| c.is_ascii_digit()))
        .map(|m| m.as_str().to_string())
        .collect()
}

fn sort_ranked(items: &mut [ScoredChunk]) {
    items.sort_by(|a, b| {
        b.fused_score
            .total_cmp(&a.fused_score)
            .then_with(|| a.chunk_id.cmp(&b.chunk_id))
    });
}

/// Merges both candidate lists by chunk id. A chunk missing from one list
/// scores 0 for that component. Boost is left at 0.
pub fn fuse(
    sparse_candidates: &[(String, f64)],
    dense_candidates: &[(String, f64)],
    cfg: &FusionConfig,
) -> Result<Vec<ScoredChunk>, FusionError> {
    let mut merged: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    if !sparse_candidates.is_empty() {
        let raw: Vec<f64> = sparse_candidates.iter().map(|c| c.1).collect();
        for ((id, _), norm) in sparse_candidates.iter().zip(min_max_normalize(&raw)?) {
            merged.entry(id).or_default().0 = norm;
        }
    }
    for (id, score) in dense_candidates {
        merged.entry(id).or_default().1 = *score;
    }
    let mut out: Vec<ScoredChunk> = merged
        .into_iter()
        .map(|(id, (sparse, dense))| {
            let mut c = ScoredChunk {
                chunk_id: id.to_string(),
                sparse_score_norm: sparse,
                dense_score: dense,
                boost: 0.0,
                fused_score: 0.0,
            };
            c.recompute(cfg.alpha);
            c
        })
        .collect();
    sort_ranked(&mut out);
    Ok(out)
}

/// Adds `boost_value` once to every candidate whose text contains a CVE id
/// named in the query, then re-ranks. Identity when boosting is disabled or
/// the query names no CVE id.
pub fn apply_regex_boost(
    query: &str,
    mut candidates: Vec<ScoredChunk>,
    chunk_texts: &HashMap<&str, &str>,
    cfg: &FusionConfig,
) -> Vec<ScoredChunk> {
    if !cfg.regex_boost_enabled {
        return candidates;
    }
    let ids = extract_cve_ids(query);
    if ids.is_empty() {
        return candidates;
    }
    for c in &mut candidates {
        let hit = chunk_texts
            .get(c.chunk_id.as_str())
            .is_some_and(|text| extract_cve_ids(text).iter().any(|found| ids.contains(found)));
        if hit {
            c.boost = cfg.boost_value;
            c.recompute(cfg.alpha);
        }
    }
    sort_ranked(&mut candidates);
    candidates
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedChunk {
    pub chunk: Chunk,
    pub scores: ScoredChunk,
}

/// Chunk records addressable by id.
#[derive(Debug, Clone, Default)]
pub struct ChunkStore {
    chunks: Vec<Chunk>,
    by_id: HashMap<String, usize>,
}

impl ChunkStore {
    pub fn new(chunks: Vec<Chunk>) -> Self {
        let by_id = chunks
            .iter()
            .enumerate()
            .map(|(i, c)| (c.chunk_id.clone(), i))
            .collect();
        Self { chunks, by_id }
    }

    pub fn get(&self, chunk_id: &str) -> Option<&Chunk> {
        self.by_id.get(chunk_id).map(|&i| &self.chunks[i])
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Everything a hybrid query needs, built over one chunk set.
pub struct HybridRetriever<'a> {
    pub chunks: &'a ChunkStore,
    pub sparse: &'a SparseIndex,
    pub dense: &'a DenseIndex,
    pub embedder: &'a dyn Embedder,
    /// Prepended to the query before embedding.
    pub query_prefix: &'a str,
}

impl HybridRetriever<'_> {
    pub fn retrieve(&self, query: &str, cfg: &FusionConfig) -> Result<Vec<RetrievedChunk>, FusionError> {
        cfg.validate()?;
        let sparse = self.sparse.top_k(&tokenize(query), cfg.k_sparse);
        let dense = self.dense_candidates(query, cfg.k_dense)?;
        let fused = fuse(&sparse, &dense, cfg)?;
        self.finish(query, fused, cfg)
    }

    /// Dense retrieval alone, ranked by dense score and truncated to `k_final`.
    pub fn retrieve_dense_only(&self, query: &str, cfg: &FusionConfig) -> Result<Vec<RetrievedChunk>, FusionError> {
        cfg.validate()?;
        let dense = self.dense_candidates(query, cfg.k_dense)?;
        let fused = fuse(&[], &dense, &FusionConfig { alpha: 0.0, ..*cfg })?;
        self.finish(
            query,
            fused,
            &FusionConfig {
                regex_boost_enabled: false,
                ..*cfg
            },
        )
    }

    fn dense_candidates(&self, query: &str, k: usize) -> Result<Vec<(String, f64)>, FusionError> {
        if self.dense.is_empty() {
            return Ok(Vec::new());
        }
        let text = format!("{}{}", self.query_prefix, query);
        let qv = self.embedder.embed(&text)?;
        Ok(self.dense.top_k(&qv, k)?)
    }

    fn finish(
        &self,
        query: &str,
        fused: Vec<ScoredChunk>,
        cfg: &FusionConfig,
    ) -> Result<Vec<RetrievedChunk>, FusionError> {
        let texts: HashMap<&str, &str> = fused
            .iter()
            .filter_map(|c| self.chunks.get(&c.chunk_id))
            .map(|ch| (ch.chunk_id.as_str(), ch.text.as_str()))
            .collect();
        let mut ranked = apply_regex_boost(query, fused, &texts, cfg);
        ranked.truncate(cfg.k_final);
        ranked
            .into_iter()
            .map(|scores| {
                let chunk = self
                    .chunks
                    .get(&scores.chunk_id)
                    .cloned()
                    .ok_or_else(|| FusionError::MissingChunk(scores.chunk_id.clone()))?;
                Ok(RetrievedChunk { chunk, scores })
            })
            .collect()
    }
}

pub fn retrieve_hybrid(
    query: &str,
    chunks: &ChunkStore,
    sparse_index: &SparseIndex,
    dense_index: &DenseIndex,
    embedder: &dyn Embedder,
    cfg: &FusionConfig,
) -> Result<Vec<RetrievedChunk>, FusionError> {
    HybridRetriever {
        chunks,
        sparse: sparse_index,
        dense: dense_index,
        embedder,
        query_prefix: "",
    }
    .retrieve(query, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(list: &[ScoredChunk]) -> Vec<&str> {
        list.iter().map(|c| c.chunk_id.as_str()).collect()
    }

    fn cand(items: &[(&str, f64)]) -> Vec<(String, f64)> {
        items.iter().map(|(id, s)| (id.to_string(), *s)).collect()
    }

    #[test]
    fn min_max_examples() {
        assert_eq!(min_max_normalize(&[3.0, 1.0, 2.0]).unwrap(), [1.0, 0.0, 0.5]);
        assert_eq!(min_max_normalize(&[5.0]).unwrap(), [1.0]);
        assert_eq!(min_max_normalize(&[2.0, 2.0]).unwrap(), [1.0, 1.0]);
        assert!(matches!(min_max_normalize(&[]), Err(FusionError::EmptyScores)));
        assert!(min_max_normalize(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn cve_extraction() {
        assert_eq!(extract_cve_ids("affects CVE-2024-5022 badly"), ["CVE-2024-5022"]);
        assert!(extract_cve_ids("CVE-24-1").is_empty());
        assert_eq!(
            extract_cve_ids("CVE-2024-123456 and CVE-2024-123456"),
            ["CVE-2024-123456", "CVE-2024-123456"]
        );
        assert!(extract_cve_ids("cve-2024-5022").is_empty());
        assert!(extract_cve_ids("CVE-2024-1234567").is_empty());
        assert_eq!(
            extract_cve_ids("(CVE-2024-0001),CVE-2024-0002."),
            ["CVE-2024-0001", "CVE-2024-0002"]
        );
    }

    #[test]
    fn eq2_arithmetic() {
        let cfg = FusionConfig {
            alpha: 0.7,
            ..Default::default()
        };
        let out = fuse(&cand(&[("x", 9.0)]), &cand(&[("x", 0.5)]), &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].fused_score - 0.85).abs() < 1e-12);
    }

    // Sparse {a:4, b:2, c:2} -> norm {1, 0, 0}; dense {b:0.9, d:0.6}; alpha 0.5.
    // a = 0.5, b = 0.45, c = 0, d = 0.3.
    #[test]
    fn union_with_partial_overlap() {
        let cfg = FusionConfig {
            alpha: 0.5,
            ..Default::default()
        };
        let out = fuse(
            &cand(&[("a", 4.0), ("b", 2.0), ("c", 2.0)]),
            &cand(&[("b", 0.9), ("d", 0.6)]),
            &cfg,
        )
        .unwrap();
        assert_eq!(ids(&out), ["a", "b", "d", "c"]);
        let want = [0.5, 0.45, 0.3, 0.0];
        for (c, w) in out.iter().zip(want) {
            assert!((c.fused_score - w).abs() < 1e-12, "{c:?}");
        }
    }

    #[test]
    fn alpha_zero_follows_dense() {
        let cfg = FusionConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let out = fuse(&cand(&[("s", 3.0)]), &cand(&[("p", 0.2), ("q", 0.8)]), &cfg).unwrap();
        assert_eq!(ids(&out), ["q", "p", "s"]);
    }

    #[test]
    fn both_empty() {
        assert!(fuse(&[], &[], &FusionConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn boost_lifts_matching_chunk_once() {
        let cfg = FusionConfig {
            alpha: 0.5,
            ..Default::default()
        };
        let base = vec![
            ScoredChunk {
                chunk_id: "other".into(),
                sparse_score_norm: 1.0,
                dense_score: 0.8,
                boost: 0.0,
                fused_score: 0.9,
            },
            ScoredChunk {
                chunk_id: "gold".into(),
                sparse_score_norm: 0.0,
                dense_score: 0.8,
                boost: 0.0,
                fused_score: 0.4,
            },
        ];
        let texts: HashMap<&str, &str> = [
            ("other", "unrelated advisory"),
            ("gold", "CVE-2024-5022 spoofing; see CVE-2024-5022"),
        ]
        .into_iter()
        .collect();
        let out = apply_regex_boost("Is CVE-2024-5022 exploitable?", base.clone(), &texts, &cfg);
        let longer: HashMap<&str, &str> = [("gold", "CVE-2024-50221 only")].into_iter().collect();
        let none = apply_regex_boost("Is CVE-2024-5022 exploitable?", base.clone(), &longer, &cfg);
        assert!(none.iter().all(|c| c.boost == 0.0));
        assert_eq!(ids(&out), ["gold", "other"]);
        assert!((out[0].fused_score - 1.4).abs() < 1e-12);
        assert_eq!(out[0].boost, 1.0);

        assert_eq!(
            apply_regex_boost("no identifiers here", base.clone(), &texts, &cfg),
            base
        );
        let off = FusionConfig {
            regex_boost_enabled: false,
            ..cfg
        };
        assert_eq!(apply_regex_boost("CVE-2024-5022", base.clone(), &texts, &off), base);
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig {
            alpha: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FusionConfig {
            k_final: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FusionConfig::default().validate().is_ok());
    }
}
