mod common;

use atr_core::corpus::{default_joins_path, Corpus};
use atr_core::metrics::{anova_logits, LogitGroups};
use atr_core::rerank::{Reranker, WindowConfig};

#[test]
fn corpus_survives_a_disk_round_trip() {
    let desk = common::load_desk();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    desk.corpus.write_jsonl(&path, &default_joins_path(&path)).unwrap();
    let back = Corpus::read_jsonl(&path, &default_joins_path(&path)).unwrap();
    assert_eq!(back.tables(), desk.corpus.tables());
    assert_eq!(back.joins(), desk.corpus.joins());
    assert_eq!(desk.corpus.len(), 29);
    assert!(!desk.corpus.databases_with_joins().contains("museum_visit"));
}

#[test]
fn metrics_sheet_matches_exactly() {
    let desk = common::load_desk();
    let report = common::desk_report(&desk, WindowConfig::SPIDER);
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let expected = std::fs::read_to_string(common::fixture("desk/expected_metrics.csv")).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), expected);
}

#[test]
fn smaller_window_keeps_the_selection() {
    let desk = common::load_desk();
    let wide = common::run_pipeline(&desk.corpus, &desk.queries, &Reranker::new(WindowConfig::SPIDER), &desk.scorer);
    let narrow = common::run_pipeline(&desk.corpus, &desk.queries, &Reranker::new(WindowConfig::SPIDER2), &desk.scorer);
    for (a, b) in wide.iter().zip(&narrow) {
        assert_eq!(a.retrieved, b.retrieved);
        assert!(b.pass_count > a.pass_count);
        assert!(b.max_window_tokens < a.max_window_tokens);
    }
}

#[test]
fn logit_groups_separate_on_the_fixture() {
    let desk = common::load_desk();
    let outcomes = common::run_pipeline(&desk.corpus, &desk.queries, &Reranker::new(WindowConfig::SPIDER), &desk.scorer);
    let mut groups = LogitGroups::default();
    for (q, o) in desk.queries.iter().zip(&outcomes) {
        groups.add_trace(&o.trace, &q.gold);
    }
    let r = anova_logits(&groups).unwrap();
    assert!(r.eta_squared > 0.5, "{r:?}");
    assert!(r.group_means["relevant"] > r.group_means["irrelevant"]);
    assert_eq!(r.group_sizes["threshold"], 20 * 3);
}
