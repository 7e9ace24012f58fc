//! Adaptive table retrieval.
//!
//! Given a natural-language query and a corpus of database tables, the engine
//! ranks every table by embedding similarity, then reranks the top candidates
//! with a relevance scorer that emits one logit per table plus a logit for a
//! threshold token. Every table that outranks the threshold is retrieved, so
//! the number of returned tables depends on the query.
//!
//! Module map:
//!
//! - [`corpus`]: schema ingestion, flattening, tokenization, join groups.
//! - [`firststage`]: embedding providers and cosine top-N retrieval.
//! - [`scorer`]: the scorer contract with mock and HTTP implementations.
//! - [`rerank`]: sliding-window threshold reranking and its single-pass oracle.
//! - [`losses`]: training objectives with analytic gradients.
//! - [`metrics`]: precision/recall/F1, complete recall, ANOVA on logits.
//! - [`preprocess`]: training example construction and splitting.

pub mod corpus;
pub mod firststage;
pub mod jsonl;
pub mod losses;
pub mod metrics;
pub mod preprocess;
pub mod rerank;
pub mod scorer;

pub use corpus::{Corpus, CorpusError, JoinGraph, QueryRecord, TableRecord};
pub use firststage::{Candidate, DenseIndex, EmbeddingProvider, EmbeddingVector};
pub use rerank::{RerankOutcome, RerankStrategy, Reranker, WindowConfig};
pub use scorer::{MockScorer, RelevanceScorer, RemoteScorer, ScoreRequest, ScoreResponse};
