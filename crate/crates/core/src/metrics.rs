//! Retrieval metrics, token accounting and logit-group ANOVA.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::jsonl::JsonlError;
use crate::rerank::PassRecord;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("query `{0}` has no gold tables")]
    EmptyGold(String),
    #[error("nothing to aggregate")]
    Empty,
    #[error("anova: {0}")]
    Anova(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Per-query set metrics, all in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetScores {
    pub precision: f64,
    pub recall: f64,
    pub complete_recall: f64,
    pub f1: f64,
}

/// Precision, recall, complete recall and F1 of `retrieved` against `gold`.
/// Empty retrieval has precision 0.
pub fn score_query<S: AsRef<str>>(retrieved: &[S], gold: &BTreeSet<String>) -> Option<SetScores> {
    if gold.is_empty() {
        return None;
    }
    let got: BTreeSet<&str> = retrieved.iter().map(AsRef::as_ref).collect();
    let hits = gold.iter().filter(|g| got.contains(g.as_str())).count() as f64;
    let precision = if got.is_empty() { 0.0 } else { hits / got.len() as f64 };
    let recall = hits / gold.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Some(SetScores {
        precision,
        recall,
        complete_recall: if hits as usize == gold.len() { 1.0 } else { 0.0 },
        f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub query_id: String,
    #[serde(flatten)]
    pub scores: SetScores,
    pub k_retrieved: usize,
    pub input_tokens: usize,
    pub pass_count: usize,
}

impl QueryReport {
    pub fn new<S: AsRef<str>>(
        query_id: &str,
        retrieved: &[S],
        gold: &BTreeSet<String>,
        input_tokens: usize,
        pass_count: usize,
    ) -> Result<Self, MetricsError> {
        let scores = score_query(retrieved, gold).ok_or_else(|| MetricsError::EmptyGold(query_id.to_string()))?;
        Ok(QueryReport {
            query_id: query_id.to_string(),
            scores,
            k_retrieved: retrieved.len(),
            input_tokens,
            pass_count,
        })
    }
}

/// Macro averages scaled to percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "CR")]
    pub complete_recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_query: Vec<QueryReport>,
    #[serde(rename = "macro")]
    pub macro_scores: MacroScores,
    pub mean_k: f64,
    pub mean_input_tokens: f64,
    pub mean_pass_count: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Per-query means, rates multiplied by 100.
pub fn aggregate(per_query: Vec<QueryReport>) -> Result<MetricsReport, MetricsError> {
    if per_query.is_empty() {
        return Err(MetricsError::Empty);
    }
    let pct = |f: fn(&SetScores) -> f64| 100.0 * mean(per_query.iter().map(|q| f(&q.scores)));
    Ok(MetricsReport {
        macro_scores: MacroScores {
            precision: pct(|s| s.precision),
            recall: pct(|s| s.recall),
            complete_recall: pct(|s| s.complete_recall),
            f1: pct(|s| s.f1),
        },
        mean_k: mean(per_query.iter().map(|q| q.k_retrieved as f64)),
        mean_input_tokens: mean(per_query.iter().map(|q| q.input_tokens as f64)),
        mean_pass_count: mean(per_query.iter().map(|q| q.pass_count as f64)),
        per_query,
    })
}

pub const CSV_HEADER: [&str; 8] = [
    "query_id",
    "precision",
    "recall",
    "complete_recall",
    "f1",
    "k_retrieved",
    "input_tokens",
    "pass_count",
];

impl MetricsReport {
    /// Macro row (`MACRO`, with mean k, tokens and passes) followed by one row
    /// per query. Rates are percentages.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(CSV_HEADER)?;
        let m = &self.macro_scores;
        let f = |x: f64| format!("{x:.6}");
        w.write_record([
            "MACRO".to_string(),
            f(m.precision),
            f(m.recall),
            f(m.complete_recall),
            f(m.f1),
            f(self.mean_k),
            f(self.mean_input_tokens),
            f(self.mean_pass_count),
        ])?;
        for q in &self.per_query {
            let s = &q.scores;
            w.write_record([
                q.query_id.clone(),
                f(100.0 * s.precision),
                f(100.0 * s.recall),
                f(100.0 * s.complete_recall),
                f(100.0 * s.f1),
                q.k_retrieved.to_string(),
                q.input_tokens.to_string(),
                q.pass_count.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<(), MetricsError> {
        let file = std::fs::File::create(path).map_err(|e| JsonlError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn write_json_file(&self, path: &Path) -> Result<(), MetricsError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| JsonlError::io(path, e).into())
    }

    /// One gnuplot-ready TSV row: mean input tokens, then P, R, CR, F1.
    pub fn plot_row(&self) -> String {
        let m = &self.macro_scores;
        format!(
            "{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            self.mean_input_tokens, m.precision, m.recall, m.complete_recall, m.f1
        )
    }
}

pub const PLOT_HEADER: &str = "# mean_input_tokens\tP\tR\tCR\tF1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogitGroups {
    pub relevant: Vec<f64>,
    pub irrelevant: Vec<f64>,
    pub threshold: Vec<f64>,
}

impl LogitGroups {
    /// Adds one query's trace: each table contributes the logit from the last
    /// pass that scored it, each pass contributes its threshold logit.
    pub fn add_trace(&mut self, trace: &[PassRecord], gold: &BTreeSet<String>) {
        let mut last: HashMap<&str, f64> = HashMap::new();
        let mut order = Vec::new();
        for pass in trace {
            self.threshold.push(pass.threshold_logit);
            for (id, &logit) in pass.window.iter().zip(&pass.table_logits) {
                if last.insert(id, logit).is_none() {
                    order.push(id.as_str());
                }
            }
        }
        for id in order {
            let logit = last[id];
            if gold.contains(id) {
                self.relevant.push(logit);
            } else {
                self.irrelevant.push(logit);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaReport {
    pub f_statistic: f64,
    pub eta_squared: f64,
    pub ss_between: f64,
    pub ss_within: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub group_means: BTreeMap<String, f64>,
    pub group_sizes: BTreeMap<String, usize>,
}

/// One-way ANOVA over named groups; empty groups are ignored.
pub fn anova(groups: &[(&str, &[f64])]) -> Result<AnovaReport, MetricsError> {
    let groups: Vec<&(&str, &[f64])> = groups.iter().filter(|(_, xs)| !xs.is_empty()).collect();
    if groups.len() < 2 {
        return Err(MetricsError::Anova("need at least two non-empty groups".into()));
    }
    let total: usize = groups.iter().map(|(_, xs)| xs.len()).sum();
    if total < 3 {
        return Err(MetricsError::Anova("need at least three observations".into()));
    }
    if groups.iter().any(|(_, xs)| xs.iter().any(|x| !x.is_finite())) {
        return Err(MetricsError::Anova("non-finite observation".into()));
    }
    let grand = groups.iter().flat_map(|(_, xs)| xs.iter()).sum::<f64>() / total as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    let mut group_means = BTreeMap::new();
    let mut group_sizes = BTreeMap::new();
    for (name, xs) in &groups {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        ss_between += xs.len() as f64 * (m - grand).powi(2);
        ss_within += xs.iter().map(|x| (x - m).powi(2)).sum::<f64>();
        group_means.insert(name.to_string(), m);
        group_sizes.insert(name.to_string(), xs.len());
    }
    let df_between = groups.len() - 1;
    let df_within = total - groups.len();
    let ss_total = ss_between + ss_within;
    let eta_squared = if ss_total > 0.0 { ss_between / ss_total } else { 0.0 };
    let f_statistic = if ss_between == 0.0 {
        0.0
    } else if ss_within == 0.0 || df_within == 0 {
        f64::INFINITY
    } else {
        (ss_between / df_between as f64) / (ss_within / df_within as f64)
    };
    Ok(AnovaReport {
        f_statistic,
        eta_squared,
        ss_between,
        ss_within,
        df_between,
        df_within,
        group_means,
        group_sizes,
    })
}

pub fn anova_logits(groups: &LogitGroups) -> Result<AnovaReport, MetricsError> {
    anova(&[
        ("relevant", &groups.relevant),
        ("irrelevant", &groups.irrelevant),
        ("threshold", &groups.threshold),
    ])
}
