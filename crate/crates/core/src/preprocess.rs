//! Training-data construction: ranked-segment examples, size filtering and a
//! query-grouped train/validation split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QueryRecord, Tokenizer};
use crate::firststage::{DenseIndex, EmbedError, EmbeddingProvider};
use crate::jsonl::{self, JsonlError};

pub const SEGMENT_SIZE: usize = 50;
pub const DEFAULT_MAX_TABLE_TOKENS: usize = 512;
pub const DEFAULT_SPLIT_RATIO: f64 = 0.85;

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    Ratio(f64),
    #[error("segment size must be positive")]
    SegmentSize,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Segment {
    /// Initial ranks 1..=50.
    High,
    /// Initial ranks 51..=100.
    Low,
}

/// One training instance: a query against one half of its top-100 list.
/// Field names follow the loss batch format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query_id: String,
    pub query_text: String,
    pub segment: Segment,
    pub table_ids: Vec<String>,
    pub relevance: Vec<bool>,
    pub group_labels: Vec<i64>,
}

impl TrainingExample {
    pub fn positives(&self) -> usize {
        self.relevance.iter().filter(|&&r| r).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DropReason {
    GoldNotInCorpus { table_id: String },
    OversizedGold { table_id: String, tokens: usize, limit: usize },
    NoJoinData { database_id: String },
    EmptyGold,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropReason::GoldNotInCorpus { table_id } => write!(f, "gold table {table_id} not in corpus"),
            DropReason::OversizedGold { table_id, tokens, limit } => {
                write!(f, "gold table {table_id} has {tokens} tokens (limit {limit})")
            }
            DropReason::NoJoinData { database_id } => {
                write!(f, "database {database_id} declares no foreign keys")
            }
            DropReason::EmptyGold => f.write_str("no gold tables"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedQuery {
    pub query_id: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemovedTable {
    pub table_id: String,
    pub tokens: usize,
}

/// Result of [`filter_corpus`].
#[derive(Debug, Clone)]
pub struct Filtered {
    pub corpus: Corpus,
    pub queries: Vec<QueryRecord>,
    pub removed_tables: Vec<RemovedTable>,
    pub dropped: Vec<DroppedQuery>,
}

fn database_of<'a>(corpus: &'a Corpus, table_id: &'a str) -> &'a str {
    match corpus.get(table_id) {
        Some(t) => &t.database_id,
        None => table_id.split_once('.').map_or(table_id, |(db, _)| db),
    }
}

/// Removes tables whose flattened text exceeds `max_tokens`, then drops
/// queries that need a removed table or whose database has no foreign keys
/// left. Applying it twice changes nothing.
pub fn filter_corpus(
    corpus: &Corpus,
    queries: &[QueryRecord],
    tokenizer: &dyn Tokenizer,
    max_tokens: usize,
) -> Filtered {
    let mut removed = BTreeMap::new();
    let filtered = corpus.retain_tables(|t| {
        let n = tokenizer.count(&t.flattened_text);
        if n > max_tokens {
            removed.insert(t.table_id.clone(), n);
            false
        } else {
            true
        }
    });
    let with_joins: BTreeSet<String> = filtered.databases_with_joins().into_iter().map(str::to_string).collect();

    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for q in queries {
        let reason = q
            .gold
            .iter()
            .find_map(|g| {
                removed.get(g).map(|&tokens| DropReason::OversizedGold {
                    table_id: g.clone(),
                    tokens,
                    limit: max_tokens,
                })
            })
            .or_else(|| {
                q.gold
                    .iter()
                    .map(|g| database_of(corpus, g))
                    .find(|db| !with_joins.contains(*db))
                    .map(|db| DropReason::NoJoinData {
                        database_id: db.to_string(),
                    })
            });
        match reason {
            Some(reason) => dropped.push(DroppedQuery {
                query_id: q.query_id.clone(),
                reason,
            }),
            None => kept.push(q.clone()),
        }
    }
    Filtered {
        corpus: filtered,
        queries: kept,
        removed_tables: removed
            .into_iter()
            .map(|(table_id, tokens)| RemovedTable { table_id, tokens })
            .collect(),
        dropped,
    }
}

/// Builds the HIGH and LOW examples of one query. Returns the drop reason if
/// the query cannot be labeled against this corpus.
pub fn examples_for_query(
    query: &QueryRecord,
    corpus: &Corpus,
    index: &DenseIndex<'_>,
    provider: &dyn EmbeddingProvider,
    segment_size: usize,
) -> Result<Result<Vec<TrainingExample>, DropReason>, PreprocessError> {
    if segment_size == 0 {
        return Err(PreprocessError::SegmentSize);
    }
    if query.gold.is_empty() {
        return Ok(Err(DropReason::EmptyGold));
    }
    if let Some(missing) = query.gold.iter().find(|g| !corpus.contains(g)) {
        return Ok(Err(DropReason::GoldNotInCorpus {
            table_id: missing.clone(),
        }));
    }
    let ranked = index.retrieve_top_n(query, provider, 2 * segment_size)?;
    let examples = ranked
        .chunks(segment_size)
        .zip([Segment::High, Segment::Low])
        .map(|(chunk, segment)| TrainingExample {
            query_id: query.query_id.clone(),
            query_text: query.text.clone(),
            segment,
            table_ids: chunk.iter().map(|c| c.table_id.clone()).collect(),
            relevance: chunk.iter().map(|c| query.gold.contains(&c.table_id)).collect(),
            group_labels: chunk
                .iter()
                .map(|c| corpus.group_label(&c.table_id).map_or(-1, |l| l as i64))
                .collect(),
        })
        .collect();
    Ok(Ok(examples))
}

/// Two examples per query (one when the corpus has no more than one segment
/// of tables); queries with unresolvable gold tables are reported, not built.
pub fn build_examples(
    queries: &[QueryRecord],
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    segment_size: usize,
) -> Result<(Vec<TrainingExample>, Vec<DroppedQuery>), PreprocessError> {
    let index = DenseIndex::build(corpus, provider)?;
    let mut examples = Vec::with_capacity(2 * queries.len());
    let mut dropped = Vec::new();
    for q in queries {
        match examples_for_query(q, corpus, &index, provider, segment_size)? {
            Ok(ex) => examples.extend(ex),
            Err(reason) => {
                log::info!("dropping {}: {reason}", q.query_id);
                dropped.push(DroppedQuery {
                    query_id: q.query_id.clone(),
                    reason,
                });
            }
        }
    }
    Ok((examples, dropped))
}

/// Number of training queries out of `n`: ⌈ratio·n⌉, guarded against
/// representation error in the product.
pub fn train_query_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Seeded shuffle of query ids; every example of a query lands in the same
/// split. Within each split, examples follow shuffled query order.
pub fn split_train_val(
    examples: &[TrainingExample],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<TrainingExample>, Vec<TrainingExample>), PreprocessError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(PreprocessError::Ratio(ratio));
    }
    let mut ids: Vec<&str> = Vec::new();
    let mut by_query: BTreeMap<&str, Vec<&TrainingExample>> = BTreeMap::new();
    for ex in examples {
        let entry = by_query.entry(&ex.query_id).or_default();
        if entry.is_empty() {
            ids.push(&ex.query_id);
        }
        entry.push(ex);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = train_query_count(ids.len(), ratio);
    let collect = |ids: &[&str]| -> Vec<TrainingExample> {
        ids.iter()
            .flat_map(|id| by_query[id].iter().map(|&ex| ex.clone()))
            .collect()
    };
    Ok((collect(&ids[..n_train]), collect(&ids[n_train..])))
}

/// Writes `train.jsonl`, `val.jsonl` and `dropped.log` into `dir`.
pub fn write_outputs(
    dir: &Path,
    train: &[TrainingExample],
    val: &[TrainingExample],
    removed_tables: &[RemovedTable],
    dropped: &[DroppedQuery],
) -> Result<(), PreprocessError> {
    std::fs::create_dir_all(dir).map_err(|e| JsonlError::io(dir, e))?;
    jsonl::write(&dir.join("train.jsonl"), train)?;
    jsonl::write(&dir.join("val.jsonl"), val)?;
    let log_path = dir.join("dropped.log");
    let mut text = Vec::new();
    for t in removed_tables {
        writeln!(text, "table\t{}\t{} tokens", t.table_id, t.tokens).expect("write to vec");
    }
    for d in dropped {
        writeln!(text, "query\t{}\t{}", d.query_id, d.reason).expect("write to vec");
    }
    std::fs::write(&log_path, text).map_err(|e| JsonlError::io(&log_path, e))?;
    Ok(())
}
