//! Relevance scorer contract.
//!
//! A scorer reads the query together with an ordered window of tables and
//! returns one logit for the threshold token plus one logit per table. The
//! engine never assumes how the logits arise: [`MockScorer`] looks them up in
//! a table, [`RemoteScorer`] asks a model server over HTTP.
//!
//! Wire protocol of the model server:
//!
//! - `POST /v1/score` with `{"query": str, "tables": [{"id": str, "text": str}]}`
//!   answers `200 {"threshold_logit": num, "table_logits": [num], "embeddings"?: [[num]]}`,
//!   `400` on a malformed body, `413` when the assembled sequence is over the
//!   server's token limit, `503` while the model loads.
//! - `GET /v1/health` answers `{"status": "ok", "max_tokens": int}`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{DefaultTokenizer, TableRecord, Tokenizer};
use crate::jsonl::JsonlError;

pub const THRESHOLD_MARKER: &str = "[THR]";
pub const TABLE_MARKER: &str = "[TAB]";
pub const DEFAULT_MAX_SEQUENCE_TOKENS: usize = 8192;
pub const DEFAULT_RETRIES: u32 = 3;
pub const DEFAULT_BACKOFF: Duration = Duration::from_millis(200);

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("score request has no tables")]
    EmptyRequest,
    #[error("score request has {count} tables, window capacity is {capacity}")]
    TooManyTables { count: usize, capacity: usize },
    #[error("sequence reaches {tokens} tokens at {}, limit is {limit}", overflow_at.as_deref().unwrap_or("the query"))]
    SequenceTooLong {
        /// First table whose addition crosses the limit; `None` when the
        /// query alone is too long.
        overflow_at: Option<String>,
        tokens: usize,
        limit: usize,
    },
    #[error("mock scorer has no logit for table `{0}`")]
    UnknownTable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("scorer rejected request ({status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("scorer unreachable after {attempts} attempts: {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("invalid mock scorer file: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// `[THR] <query> [TAB] <table_1> [TAB] <table_2> ...`
pub fn assemble_sequence(query_text: &str, tables: &[&TableRecord]) -> String {
    let mut out = format!("{THRESHOLD_MARKER} {query_text}");
    for t in tables {
        out.push(' ');
        out.push_str(TABLE_MARKER);
        out.push(' ');
        out.push_str(&t.flattened_text);
    }
    out
}

/// Size limits a request must satisfy before it reaches a scorer.
#[derive(Debug, Clone, Copy)]
pub struct RequestLimits {
    pub max_sequence_tokens: usize,
    pub window_capacity: Option<usize>,
}

impl Default for RequestLimits {
    fn default() -> Self {
        RequestLimits {
            max_sequence_tokens: DEFAULT_MAX_SEQUENCE_TOKENS,
            window_capacity: None,
        }
    }
}

/// Token count of [`assemble_sequence`], accumulated segment by segment.
/// Whitespace separates segments, so the sum equals the count of the whole
/// string.
pub fn sequence_tokens(tokenizer: &dyn Tokenizer, query_text: &str, tables: &[&TableRecord]) -> usize {
    let head = tokenizer.count(THRESHOLD_MARKER) + tokenizer.count(query_text);
    let marker = tokenizer.count(TABLE_MARKER);
    head + tables
        .iter()
        .map(|t| marker + tokenizer.count(&t.flattened_text))
        .sum::<usize>()
}

/// A validated window: query plus ordered tables.
#[derive(Debug, Clone)]
pub struct ScoreRequest<'a> {
    query_text: &'a str,
    tables: Vec<&'a TableRecord>,
    tokens: usize,
}

impl<'a> ScoreRequest<'a> {
    pub fn new(query_text: &'a str, tables: Vec<&'a TableRecord>, limits: &RequestLimits) -> Result<Self, ScoreError> {
        Self::with_tokenizer(query_text, tables, limits, &DefaultTokenizer)
    }

    pub fn with_tokenizer(
        query_text: &'a str,
        tables: Vec<&'a TableRecord>,
        limits: &RequestLimits,
        tokenizer: &dyn Tokenizer,
    ) -> Result<Self, ScoreError> {
        if tables.is_empty() {
            return Err(ScoreError::EmptyRequest);
        }
        if let Some(capacity) = limits.window_capacity {
            if tables.len() > capacity {
                return Err(ScoreError::TooManyTables {
                    count: tables.len(),
                    capacity,
                });
            }
        }
        let limit = limits.max_sequence_tokens;
        let mut tokens = tokenizer.count(THRESHOLD_MARKER) + tokenizer.count(query_text);
        if tokens > limit {
            return Err(ScoreError::SequenceTooLong {
                overflow_at: None,
                tokens,
                limit,
            });
        }
        let marker = tokenizer.count(TABLE_MARKER);
        for t in &tables {
            tokens += marker + tokenizer.count(&t.flattened_text);
            if tokens > limit {
                return Err(ScoreError::SequenceTooLong {
                    overflow_at: Some(t.table_id.clone()),
                    tokens,
                    limit,
                });
            }
        }
        Ok(ScoreRequest {
            query_text,
            tables,
            tokens,
        })
    }

    pub fn query_text(&self) -> &str {
        self.query_text
    }

    pub fn tables(&self) -> &[&'a TableRecord] {
        &self.tables
    }

    /// Token length of the assembled sequence.
    pub fn token_count(&self) -> usize {
        self.tokens
    }

    pub fn sequence(&self) -> String {
        assemble_sequence(self.query_text, &self.tables)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub threshold_logit: f64,
    pub table_logits: Vec<f64>,
    #[serde(default, rename = "embeddings", skip_serializing_if = "Option::is_none")]
    pub table_embeddings: Option<Vec<Vec<f64>>>,
}

impl ScoreResponse {
    /// Checks the response against the request it answers.
    pub fn validate(&self, request: &ScoreRequest<'_>) -> Result<(), ScoreError> {
        let n = request.tables().len();
        if self.table_logits.len() != n {
            return Err(ScoreError::Protocol(format!(
                "{} table logits for {n} tables",
                self.table_logits.len()
            )));
        }
        if !self.threshold_logit.is_finite() || self.table_logits.iter().any(|x| !x.is_finite()) {
            return Err(ScoreError::Protocol("non-finite logit".into()));
        }
        if let Some(emb) = &self.table_embeddings {
            if emb.len() != n {
                return Err(ScoreError::Protocol(format!("{} embeddings for {n} tables", emb.len())));
            }
            if let Some(first) = emb.first() {
                if emb.iter().any(|e| e.len() != first.len()) {
                    return Err(ScoreError::Protocol("embeddings differ in dimension".into()));
                }
            }
        }
        Ok(())
    }
}

pub trait RelevanceScorer: Send + Sync {
    fn score(&self, request: &ScoreRequest<'_>) -> Result<ScoreResponse, ScoreError>;
}

/// Threshold logit and per-table logits for one lookup context.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogitTable {
    pub threshold_logit: f64,
    #[serde(default)]
    pub table_logits: BTreeMap<String, f64>,
}

/// Lookup logits, optionally overridden per query text. A table missing from
/// the query's entry falls back to the top-level map.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScorerSpec {
    #[serde(flatten)]
    pub default: LogitTable,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_query: BTreeMap<String, LogitTable>,
}

/// Window-independent scorer: every table's logit is a constant lookup.
#[derive(Debug, Clone)]
pub struct MockScorer {
    spec: MockScorerSpec,
}

impl MockScorer {
    pub fn new(spec: MockScorerSpec) -> Result<Self, ScoreError> {
        let all = std::iter::once(&spec.default).chain(spec.per_query.values());
        for table in all {
            if !table.threshold_logit.is_finite() || table.table_logits.values().any(|x| !x.is_finite()) {
                return Err(ScoreError::BadSpec("logits must be finite".into()));
            }
        }
        Ok(MockScorer { spec })
    }

    /// Same logits for every query.
    pub fn uniform(threshold_logit: f64, table_logits: impl IntoIterator<Item = (String, f64)>) -> Result<Self, ScoreError> {
        MockScorer::new(MockScorerSpec {
            default: LogitTable {
                threshold_logit,
                table_logits: table_logits.into_iter().collect(),
            },
            per_query: BTreeMap::new(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ScoreError> {
        let raw = std::fs::read_to_string(path).map_err(|e| JsonlError::io(path, e))?;
        let spec = serde_json::from_str(&raw).map_err(|e| ScoreError::BadSpec(format!("{}: {e}", path.display())))?;
        MockScorer::new(spec)
    }

    pub fn spec(&self) -> &MockScorerSpec {
        &self.spec
    }

    pub fn threshold_logit(&self, query_text: &str) -> f64 {
        self.spec
            .per_query
            .get(query_text)
            .unwrap_or(&self.spec.default)
            .threshold_logit
    }

    pub fn table_logit(&self, query_text: &str, table_id: &str) -> Option<f64> {
        self.spec
            .per_query
            .get(query_text)
            .and_then(|q| q.table_logits.get(table_id))
            .or_else(|| self.spec.default.table_logits.get(table_id))
            .copied()
    }
}

impl RelevanceScorer for MockScorer {
    fn score(&self, request: &ScoreRequest<'_>) -> Result<ScoreResponse, ScoreError> {
        let q = request.query_text();
        let table_logits = request
            .tables()
            .iter()
            .map(|t| self.table_logit(q, &t.table_id).ok_or_else(|| ScoreError::UnknownTable(t.table_id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ScoreResponse {
            threshold_logit: self.threshold_logit(q),
            table_logits,
            table_embeddings: None,
        })
    }
}

#[derive(Debug, Serialize)]
struct WireTable<'a> {
    id: &'a str,
    text: &'a str,
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    query: &'a str,
    tables: Vec<WireTable<'a>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub max_tokens: usize,
}

/// HTTP client for a model server speaking the scoring protocol.
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    endpoint: String,
    client: reqwest::blocking::Client,
    attempts: u32,
    backoff: Duration,
}

enum Attempt {
    Done(Result<ScoreResponse, ScoreError>),
    Retry(String),
}

impl RemoteScorer {
    pub fn new(endpoint: &str) -> Result<Self, ScoreError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| ScoreError::Protocol(format!("http client: {e}")))?;
        Ok(RemoteScorer {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            client,
            attempts: DEFAULT_RETRIES,
            backoff: DEFAULT_BACKOFF,
        })
    }

    /// Total attempts per request (at least 1) and the first backoff delay,
    /// doubled after each failure.
    pub fn with_retries(mut self, attempts: u32, backoff: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn health(&self) -> Result<Health, ScoreError> {
        let url = format!("{}/v1/health", self.endpoint);
        let resp = self.client.get(&url).send().map_err(|e| ScoreError::Unavailable {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ScoreError::Rejected {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        let body = resp.text().map_err(|e| ScoreError::Protocol(e.to_string()))?;
        serde_json::from_str(&body).map_err(|e| ScoreError::Protocol(format!("health body: {e}")))
    }

    fn attempt(&self, url: &str, body: &WireRequest<'_>, request: &ScoreRequest<'_>) -> Attempt {
        let resp = match self.client.post(url).json(body).send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        match status {
            200 => {
                let parsed: Result<ScoreResponse, _> = serde_json::from_str(&text);
                Attempt::Done(
                    parsed
                        .map_err(|e| ScoreError::Protocol(format!("response body: {e}")))
                        .and_then(|r| r.validate(request).map(|()| r)),
                )
            }
            503 => Attempt::Retry("503 model not ready".into()),
            s if s >= 500 => Attempt::Retry(format!("{s}: {text}")),
            s => Attempt::Done(Err(ScoreError::Rejected { status: s, body: text })),
        }
    }
}

impl RelevanceScorer for RemoteScorer {
    fn score(&self, request: &ScoreRequest<'_>) -> Result<ScoreResponse, ScoreError> {
        let url = format!("{}/v1/score", self.endpoint);
        let body = WireRequest {
            query: request.query_text(),
            tables: request
                .tables()
                .iter()
                .map(|t| WireTable {
                    id: &t.table_id,
                    text: &t.flattened_text,
                })
                .collect(),
        };
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 1..=self.attempts {
            match self.attempt(&url, &body, request) {
                Attempt::Done(result) => return result,
                Attempt::Retry(message) => {
                    log::warn!("scorer attempt {attempt}/{} failed: {message}", self.attempts);
                    last = message;
                    if attempt < self.attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(ScoreError::Unavailable {
            attempts: self.attempts,
            message: last,
        })
    }
}
