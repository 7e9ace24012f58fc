//! Sliding-window threshold reranking.
//!
//! Candidates arrive best first. Windows are processed from the bottom of the
//! initial ranking upward: the first window holds the `W` lowest-ranked
//! candidates, every later window holds the next `W - R` candidates plus the
//! `R` best tables retained from the previous window. Tables that drop out of
//! a window have their final position fixed at that pass. The scorer also
//! returns a logit for the threshold token, and tables that outrank it are
//! retrieved.
//!
//! Two ways of reading the threshold off the passes are provided:
//!
//! - [`RerankStrategy::Threshold`] (default) compares every table with the
//!   threshold logit of the pass that fixes its position and orders the
//!   retrieved tables by logit. With a window-independent scorer this returns
//!   exactly what one pass over all candidates would.
//! - [`RerankStrategy::Literal`] tracks a single global threshold rank,
//!   `rank_in_window + remaining`, frozen the first time the threshold falls
//!   below the retained block, and cuts the pass-order ranking there. Every
//!   candidate not yet visited when the rank freezes is counted as above the
//!   threshold.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DefaultTokenizer, TableRecord, Tokenizer};
use crate::firststage::Candidate;
use crate::scorer::{sequence_tokens, RelevanceScorer, RequestLimits, ScoreError, ScoreRequest};

#[derive(Debug, thiserror::Error)]
pub enum RerankError {
    #[error("invalid window config: {0}")]
    Config(String),
    #[error("no candidates to rerank")]
    EmptyCandidates,
    #[error("invalid candidate list: {0}")]
    Candidates(String),
    #[error("pass {pass}: {source}")]
    Scorer {
        pass: usize,
        #[source]
        source: ScoreError,
    },
}

impl RerankError {
    pub fn scorer_error(&self) -> Option<&ScoreError> {
        match self {
            RerankError::Scorer { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_size: usize,
    pub retention_size: usize,
}

impl WindowConfig {
    pub fn new(window_size: usize, retention_size: usize) -> Result<Self, RerankError> {
        if retention_size == 0 {
            return Err(RerankError::Config("retention size must be at least 1".into()));
        }
        if retention_size >= window_size {
            return Err(RerankError::Config(format!(
                "retention size {retention_size} must be smaller than window size {window_size}"
            )));
        }
        Ok(WindowConfig {
            window_size,
            retention_size,
        })
    }

    /// Spider and BIRD setting.
    pub const SPIDER: WindowConfig = WindowConfig {
        window_size: 20,
        retention_size: 15,
    };

    /// Spider 2.0-Lite setting.
    pub const SPIDER2: WindowConfig = WindowConfig {
        window_size: 10,
        retention_size: 5,
    };

    pub fn preset(name: &str) -> Option<WindowConfig> {
        match name {
            "spider" | "bird" => Some(Self::SPIDER),
            "spider2" => Some(Self::SPIDER2),
            _ => None,
        }
    }

    fn stride(&self) -> usize {
        self.window_size - self.retention_size
    }

    /// Scorer calls needed for `n` candidates: `1 + ceil(max(0, n - W) / (W - R))`.
    pub fn pass_count(&self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        1 + n.saturating_sub(self.window_size).div_ceil(self.stride())
    }
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self::SPIDER
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankStrategy {
    #[default]
    Threshold,
    Literal,
}

/// One scorer call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    /// Window contents in the order sent to the scorer (best initial rank first).
    pub window: Vec<String>,
    pub threshold_logit: f64,
    /// Parallel to `window`.
    pub table_logits: Vec<f64>,
    /// Best `R` by logit, best first.
    pub retained: Vec<String>,
    /// Tables whose position is fixed by this pass, best first.
    pub dropped: Vec<String>,
    /// 1-based position the threshold takes among this window's logits.
    pub threshold_window_rank: usize,
    /// Whether the global threshold rank is frozen after this pass.
    pub finalized: bool,
    pub window_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankOutcome {
    /// Retrieved tables, best first.
    pub retrieved: Vec<String>,
    /// 1-based global rank of the threshold token.
    pub threshold_rank: usize,
    pub k_q: usize,
    /// Every candidate exactly once; `retrieved` is its prefix.
    pub ranking: Vec<String>,
    pub trace: Vec<PassRecord>,
    pub pass_count: usize,
    pub max_window_tokens: usize,
    pub total_window_tokens: usize,
    /// Token length of the threshold marker, query and retrieved tables.
    pub input_tokens: usize,
}

/// Last logit seen for a candidate and whether it beat that pass's threshold.
#[derive(Debug, Clone, Copy)]
struct Verdict {
    pos: usize,
    logit: f64,
    above: bool,
}

/// Descending logit, earlier initial rank first on ties.
fn by_logit_desc(a: &Verdict, b: &Verdict) -> std::cmp::Ordering {
    b.logit.total_cmp(&a.logit).then(a.pos.cmp(&b.pos))
}

/// Position the threshold takes among `logits` sorted descending. Tables
/// tying with the threshold rank above it.
fn threshold_rank_in(threshold: f64, logits: &[f64]) -> usize {
    1 + logits.iter().filter(|&&x| x >= threshold).count()
}

pub struct Reranker<'t> {
    config: WindowConfig,
    limits: RequestLimits,
    strategy: RerankStrategy,
    tokenizer: &'t dyn Tokenizer,
}

impl Reranker<'static> {
    pub fn new(config: WindowConfig) -> Self {
        Reranker {
            config,
            limits: RequestLimits::default(),
            strategy: RerankStrategy::default(),
            tokenizer: &DefaultTokenizer,
        }
    }
}

impl<'t> Reranker<'t> {
    pub fn with_strategy(mut self, strategy: RerankStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn with_max_sequence_tokens(mut self, max: usize) -> Self {
        self.limits.max_sequence_tokens = max;
        self
    }

    pub fn with_tokenizer<'u>(self, tokenizer: &'u dyn Tokenizer) -> Reranker<'u> {
        Reranker {
            config: self.config,
            limits: self.limits,
            strategy: self.strategy,
            tokenizer,
        }
    }

    pub fn config(&self) -> WindowConfig {
        self.config
    }

    fn score_window<'a>(
        &self,
        pass: usize,
        query_text: &'a str,
        tables: Vec<&'a TableRecord>,
        scorer: &dyn RelevanceScorer,
    ) -> Result<(crate::scorer::ScoreResponse, usize), RerankError> {
        let err = |source| RerankError::Scorer { pass, source };
        let request = ScoreRequest::with_tokenizer(query_text, tables, &self.limits, self.tokenizer).map_err(err)?;
        let response = scorer.score(&request).map_err(err)?;
        response.validate(&request).map_err(err)?;
        Ok((response, request.token_count()))
    }

    /// Sliding-window reranking of `candidates` (best initial rank first).
    pub fn rerank(
        &self,
        query_text: &str,
        candidates: &[&TableRecord],
        scorer: &dyn RelevanceScorer,
    ) -> Result<RerankOutcome, RerankError> {
        let WindowConfig {
            window_size: w,
            retention_size: r,
        } = WindowConfig::new(self.config.window_size, self.config.retention_size)?;
        let n = candidates.len();
        if n == 0 {
            return Err(RerankError::EmptyCandidates);
        }

        let mut idx = n;
        let mut retained: Vec<Verdict> = Vec::new();
        // Tables in the order their positions are fixed, worst first.
        let mut fixed: Vec<Verdict> = Vec::with_capacity(n);
        let mut literal_rank = 0usize;
        let mut finalized = false;
        let mut trace = Vec::new();

        while idx > 0 {
            let step = if retained.is_empty() { w } else { w - r };
            let lo = idx.saturating_sub(step);
            let mut positions: Vec<usize> = (lo..idx).chain(retained.iter().map(|v| v.pos)).collect();
            positions.sort_unstable();
            idx = lo;

            let pass = trace.len() + 1;
            let tables: Vec<&TableRecord> = positions.iter().map(|&p| candidates[p]).collect();
            let (response, tokens) = self.score_window(pass, query_text, tables, scorer)?;
            let threshold = response.threshold_logit;

            let mut ordered: Vec<Verdict> = positions
                .iter()
                .zip(&response.table_logits)
                .map(|(&pos, &logit)| Verdict {
                    pos,
                    logit,
                    above: logit > threshold,
                })
                .collect();
            ordered.sort_by(by_logit_desc);
            let dropped = ordered.split_off(r.min(ordered.len()));
            retained = ordered;

            let window_rank = threshold_rank_in(threshold, &response.table_logits);
            if !finalized {
                literal_rank = window_rank + idx;
                finalized = window_rank > r;
            }
            fixed.extend(dropped.iter().rev());

            let id = |v: &Verdict| candidates[v.pos].table_id.clone();
            trace.push(PassRecord {
                window: positions.iter().map(|&p| candidates[p].table_id.clone()).collect(),
                threshold_logit: threshold,
                table_logits: response.table_logits,
                retained: retained.iter().map(id).collect(),
                dropped: dropped.iter().map(id).collect(),
                threshold_window_rank: window_rank,
                finalized,
                window_tokens: tokens,
            });
        }
        fixed.extend(retained.iter().rev());
        fixed.reverse();

        let (ranking, k): (Vec<Verdict>, usize) = match self.strategy {
            RerankStrategy::Literal => {
                let k = literal_rank.saturating_sub(1).min(n);
                (fixed, k)
            }
            RerankStrategy::Threshold => {
                let (mut above, below): (Vec<Verdict>, Vec<Verdict>) = fixed.into_iter().partition(|v| v.above);
                above.sort_by(by_logit_desc);
                let k = above.len();
                above.extend(below);
                (above, k)
            }
        };
        let ranking_ids: Vec<String> = ranking.iter().map(|v| candidates[v.pos].table_id.clone()).collect();
        let retrieved_tables: Vec<&TableRecord> = ranking[..k].iter().map(|v| candidates[v.pos]).collect();
        Ok(self.outcome(query_text, ranking_ids, k, &retrieved_tables, trace))
    }

    /// One scorer call over every candidate; retrieves the tables whose logit
    /// is strictly above the threshold logit, best first.
    pub fn rerank_bruteforce(
        &self,
        query_text: &str,
        candidates: &[&TableRecord],
        scorer: &dyn RelevanceScorer,
    ) -> Result<RerankOutcome, RerankError> {
        if candidates.is_empty() {
            return Err(RerankError::EmptyCandidates);
        }
        let (response, tokens) = self.score_window(1, query_text, candidates.to_vec(), scorer)?;
        let threshold = response.threshold_logit;
        let mut all: Vec<Verdict> = response
            .table_logits
            .iter()
            .enumerate()
            .map(|(pos, &logit)| Verdict {
                pos,
                logit,
                above: logit > threshold,
            })
            .collect();
        all.sort_by(by_logit_desc);
        let k = all.iter().filter(|v| v.above).count();
        let id = |v: &Verdict| candidates[v.pos].table_id.clone();
        let ranking: Vec<String> = all.iter().map(id).collect();
        let retrieved_tables: Vec<&TableRecord> = all[..k].iter().map(|v| candidates[v.pos]).collect();
        let record = PassRecord {
            window: candidates.iter().map(|t| t.table_id.clone()).collect(),
            threshold_logit: threshold,
            table_logits: response.table_logits.clone(),
            retained: ranking.clone(),
            dropped: Vec::new(),
            threshold_window_rank: threshold_rank_in(threshold, &response.table_logits),
            finalized: true,
            window_tokens: tokens,
        };
        Ok(self.outcome(query_text, ranking, k, &retrieved_tables, vec![record]))
    }

    fn outcome(
        &self,
        query_text: &str,
        ranking: Vec<String>,
        k: usize,
        retrieved: &[&TableRecord],
        trace: Vec<PassRecord>,
    ) -> RerankOutcome {
        RerankOutcome {
            retrieved: ranking[..k].to_vec(),
            threshold_rank: k + 1,
            k_q: k,
            ranking,
            pass_count: trace.len(),
            max_window_tokens: trace.iter().map(|p| p.window_tokens).max().unwrap_or(0),
            total_window_tokens: trace.iter().map(|p| p.window_tokens).sum(),
            input_tokens: sequence_tokens(self.tokenizer, query_text, retrieved),
            trace,
        }
    }
}

/// [`Reranker::rerank`] with default limits and strategy.
pub fn rerank(
    query_text: &str,
    candidates: &[&TableRecord],
    config: WindowConfig,
    scorer: &dyn RelevanceScorer,
) -> Result<RerankOutcome, RerankError> {
    Reranker::new(config).rerank(query_text, candidates, scorer)
}

/// [`Reranker::rerank_bruteforce`] with default limits.
pub fn rerank_bruteforce(
    query_text: &str,
    candidates: &[&TableRecord],
    scorer: &dyn RelevanceScorer,
) -> Result<RerankOutcome, RerankError> {
    Reranker::new(WindowConfig::default()).rerank_bruteforce(query_text, candidates, scorer)
}

/// Looks candidates up in the corpus, checking that ranks run 1..N in order
/// and that ids are distinct.
pub fn resolve_candidates<'c>(corpus: &'c Corpus, candidates: &[Candidate]) -> Result<Vec<&'c TableRecord>, RerankError> {
    let mut seen = HashSet::with_capacity(candidates.len());
    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if c.rank != i + 1 {
                return Err(RerankError::Candidates(format!(
                    "candidate `{}` has rank {}, expected {}",
                    c.table_id,
                    c.rank,
                    i + 1
                )));
            }
            if !seen.insert(c.table_id.as_str()) {
                return Err(RerankError::Candidates(format!("duplicate candidate `{}`", c.table_id)));
            }
            corpus
                .get(&c.table_id)
                .ok_or_else(|| RerankError::Candidates(format!("unknown table `{}`", c.table_id)))
        })
        .collect()
}

/// One line of `rerank.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRecord {
    pub query_id: String,
    pub retrieved: Vec<String>,
    pub k_q: usize,
    pub threshold_rank: usize,
    pub pass_count: usize,
    pub max_window_tokens: usize,
    pub input_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<PassRecord>>,
}

impl RerankRecord {
    pub fn from_outcome(query_id: &str, outcome: RerankOutcome, keep_trace: bool) -> Self {
        RerankRecord {
            query_id: query_id.to_string(),
            retrieved: outcome.retrieved,
            k_q: outcome.k_q,
            threshold_rank: outcome.threshold_rank,
            pass_count: outcome.pass_count,
            max_window_tokens: outcome.max_window_tokens,
            input_tokens: outcome.input_tokens,
            trace: keep_trace.then_some(outcome.trace),
        }
    }
}
