//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;

use atr_core::corpus::{Corpus, QueryRecord, TableRecord};
use atr_core::firststage::{DenseIndex, HashedProvider, DEFAULT_DIM, DEFAULT_TOP_N};
use atr_core::losses::LossBatch;
use atr_core::metrics::{aggregate, MetricsReport, QueryReport};
use atr_core::rerank::{resolve_candidates, RerankOutcome, Reranker, WindowConfig};
use atr_core::scorer::{MockScorer, RelevanceScorer};
use rand::Rng;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

/// Tables `db.c1 .. db.cN`, one column each.
pub fn numbered_tables(n: usize) -> Vec<TableRecord> {
    (1..=n)
        .map(|i| TableRecord::new("db", &format!("c{i}"), vec![format!("col{i}")]).unwrap())
        .collect()
}

/// `n` pairwise-distinct values in [-8, 8), plus one more distinct from all.
pub fn distinct_logits<R: Rng>(rng: &mut R, n: usize) -> (Vec<f64>, f64) {
    let mut seen = HashSet::new();
    let mut draw = || loop {
        let x: f64 = rng.random_range(-8.0..8.0);
        if seen.insert(x.to_bits()) {
            return x;
        }
    };
    let logits: Vec<f64> = (0..n).map(|_| draw()).collect();
    (logits, draw())
}

pub fn mock_for(tables: &[TableRecord], logits: &[f64], threshold: f64) -> MockScorer {
    MockScorer::uniform(
        threshold,
        tables.iter().zip(logits).map(|(t, &x)| (t.table_id.clone(), x)),
    )
    .unwrap()
}

/// Independent single-pass selection: indices with logit above the
/// threshold, highest logit first.
pub fn oracle_selection(logits: &[f64], threshold: f64) -> Vec<usize> {
    let mut picked: Vec<usize> = (0..logits.len()).filter(|&i| logits[i] > threshold).collect();
    picked.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
    picked
}

pub struct WindowCase {
    pub tables: Vec<TableRecord>,
    pub logits: Vec<f64>,
    pub threshold: f64,
    pub config: WindowConfig,
}

pub fn random_window_case<R: Rng>(rng: &mut R) -> WindowCase {
    let n = rng.random_range(1..=30);
    let w = rng.random_range(2..=10);
    let r = rng.random_range(1..w);
    let (logits, threshold) = distinct_logits(rng, n);
    WindowCase {
        tables: numbered_tables(n),
        logits,
        threshold,
        config: WindowConfig::new(w, r).unwrap(),
    }
}

/// Direct set arithmetic: (P, R, CR, F1).
pub fn oracle_set_metrics(retrieved: &[String], gold: &BTreeSet<String>) -> (f64, f64, f64, f64) {
    let hits = retrieved.iter().filter(|t| gold.contains(*t)).count();
    let p = if retrieved.is_empty() {
        0.0
    } else {
        hits as f64 / retrieved.len() as f64
    };
    let r = hits as f64 / gold.len() as f64;
    let cr = if gold.iter().all(|g| retrieved.contains(g)) { 1.0 } else { 0.0 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, cr, f1)
}

/// Textbook one-way ANOVA by raw sums: SS_total = Σx² − (Σx)²/N,
/// SS_between = Σ n_g·mean_g² − (Σx)²/N. Returns (F, η²).
pub fn oracle_anova(groups: &[Vec<f64>]) -> (f64, f64) {
    let n: usize = groups.iter().map(Vec::len).sum();
    let sum: f64 = groups.iter().flatten().sum();
    let sum_sq: f64 = groups.iter().flatten().map(|x| x * x).sum();
    let correction = sum * sum / n as f64;
    let ss_total = sum_sq - correction;
    let ss_between = groups
        .iter()
        .map(|g| {
            let s: f64 = g.iter().sum();
            s * s / g.len() as f64
        })
        .sum::<f64>()
        - correction;
    let ss_within = ss_total - ss_between;
    let k = groups.len();
    let f = (ss_between / (k - 1) as f64) / (ss_within / (n - k) as f64);
    (f, ss_between / ss_total)
}

pub fn random_batch<R: Rng>(rng: &mut R, with_embeddings: bool) -> LossBatch {
    let n = rng.random_range(2..=8);
    let dim = rng.random_range(2..=4);
    let table_logits = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
    let mut relevance: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    relevance[0] = true;
    let (embeddings, group_labels) = if with_embeddings {
        (
            (0..n)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            (0..n).map(|_| rng.random_range(0..3)).collect(),
        )
    } else {
        (vec![], vec![])
    };
    LossBatch {
        table_logits,
        threshold_logit: rng.random_range(-3.0..3.0),
        relevance,
        embeddings,
        group_labels,
    }
}

pub struct Desk {
    pub corpus: Corpus,
    pub queries: Vec<QueryRecord>,
    pub scorer: MockScorer,
}

pub fn load_desk() -> Desk {
    Desk {
        corpus: Corpus::ingest_dir(&fixture("desk/schemas")).unwrap(),
        queries: QueryRecord::read_jsonl(&fixture("desk/queries.jsonl")).unwrap(),
        scorer: MockScorer::from_file(&fixture("desk/mock_scorer.json")).unwrap(),
    }
}

/// Hashed first stage (default dim and depth) followed by reranking.
pub fn run_pipeline(
    corpus: &Corpus,
    queries: &[QueryRecord],
    reranker: &Reranker<'_>,
    scorer: &dyn RelevanceScorer,
) -> Vec<RerankOutcome> {
    let provider = HashedProvider::new(DEFAULT_DIM).unwrap();
    let index = DenseIndex::build(corpus, &provider).unwrap();
    queries
        .iter()
        .map(|q| {
            let candidates = index.retrieve_top_n(q, &provider, DEFAULT_TOP_N).unwrap();
            let tables = resolve_candidates(corpus, &candidates).unwrap();
            reranker.rerank(&q.text, &tables, scorer).unwrap()
        })
        .collect()
}

pub fn desk_report(desk: &Desk, config: WindowConfig) -> MetricsReport {
    let outcomes = run_pipeline(&desk.corpus, &desk.queries, &Reranker::new(config), &desk.scorer);
    let per_query = desk
        .queries
        .iter()
        .zip(&outcomes)
        .map(|(q, o)| QueryReport::new(&q.query_id, &o.retrieved, &q.gold, o.input_tokens, o.pass_count).unwrap())
        .collect();
    aggregate(per_query).unwrap()
}

/// Field-wise comparison of two metrics CSVs; numeric cells must agree to
/// `decimals` places. Returns the first mismatch.
pub fn compare_csv(actual: &str, expected: &str, decimals: i32) -> Result<(), String> {
    let a: Vec<&str> = actual.lines().collect();
    let e: Vec<&str> = expected.lines().collect();
    if a.len() != e.len() {
        return Err(format!("{} rows vs {} expected", a.len(), e.len()));
    }
    let tol = 0.5 * 10f64.powi(-decimals);
    for (i, (ra, re)) in a.iter().zip(&e).enumerate() {
        let ca: Vec<&str> = ra.split(',').collect();
        let ce: Vec<&str> = re.split(',').collect();
        if ca.len() != ce.len() {
            return Err(format!("row {i}: column count differs"));
        }
        for (x, y) in ca.iter().zip(&ce) {
            let same = match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(u), Ok(v)) => (u - v).abs() <= tol,
                _ => x == y,
            };
            if !same {
                return Err(format!("row {i}: `{x}` vs expected `{y}`"));
            }
        }
    }
    Ok(())
}
