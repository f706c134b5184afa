//! Hybrid sparse/dense retrieval for threat-intelligence corpora, with
//! CVE-identifier boosting, a retrieval-augmented answering pipeline, and a
//! benchmark harness.

pub mod cli;
pub mod corpus;
pub mod dense;
pub mod eval;
pub mod fusion;
pub mod generation;
pub mod http;
pub mod sparse;
pub mod synthetic;

pub use corpus::{chunk_document, load_corpus, Chunk, ChunkerConfig, CorpusFormat, SourceDocument};
pub use dense::{cosine_similarity, dense_top_k, DenseIndex, Embedder, EmbedderSpec, EmbeddingVector, HashingEmbedder};
pub use eval::{accuracy_stats, load_benchmark, run_setting, BenchmarkQuestion, EvalReport, EvalSetting, SettingName};
pub use fusion::{
    apply_regex_boost, extract_cve_ids, fuse, min_max_normalize, retrieve_hybrid, ChunkStore, FusionConfig,
    HybridRetriever, RetrievedChunk, ScoredChunk,
};
pub use generation::{build_prompt, generate_answer, parse_answer, AnswerSpace, GenerationParams, PromptTemplate};
pub use sparse::{bm25_score, build_sparse_index, sparse_top_k, tokenize, Bm25Params, SparseIndex, TokenList};
