mod common;

use std::collections::BTreeSet;

use atr_core::corpus::TableRecord;
use atr_core::rerank::{RerankStrategy, Reranker, WindowConfig};
use atr_core::scorer::{RelevanceScorer, RequestLimits, ScoreRequest};
use proptest::prelude::*;

use common::{mock_for, numbered_tables, oracle_selection};

/// (logits, threshold, W, R) with pairwise-distinct logits; the threshold
/// sits on a half-step so it never ties a table.
fn case() -> impl Strategy<Value = (Vec<f64>, f64, usize, usize)> {
    (1usize..=30, 2usize..=10)
        .prop_flat_map(|(n, w)| {
            (
                prop::collection::hash_set(-400i32..400, n),
                -400i32..400,
                Just(w),
                1..w,
            )
        })
        .prop_map(|(set, t, w, r)| {
            let logits = set.into_iter().map(|x| x as f64 / 20.0).collect();
            (logits, t as f64 / 20.0 + 0.025, w, r)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn windowed_equals_single_pass((logits, thr, w, r) in case()) {
        let tables = numbered_tables(logits.len());
        let refs: Vec<&TableRecord> = tables.iter().collect();
        let scorer = mock_for(&tables, &logits, thr);
        let reranker = Reranker::new(WindowConfig::new(w, r).unwrap());
        let windowed = reranker.rerank("q", &refs, &scorer).unwrap();
        let single = reranker.rerank_bruteforce("q", &refs, &scorer).unwrap();
        let oracle: Vec<String> = oracle_selection(&logits, thr).into_iter().map(|i| tables[i].table_id.clone()).collect();
        prop_assert_eq!(&windowed.retrieved, &oracle);
        prop_assert_eq!(&single.retrieved, &oracle);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn outcome_invariants((logits, thr, w, r) in case(), literal in any::<bool>()) {
        let n = logits.len();
        let tables = numbered_tables(n);
        let refs: Vec<&TableRecord> = tables.iter().collect();
        let scorer = mock_for(&tables, &logits, thr);
        let cfg = WindowConfig::new(w, r).unwrap();
        let strategy = if literal { RerankStrategy::Literal } else { RerankStrategy::Threshold };
        let out = Reranker::new(cfg).with_strategy(strategy).rerank("q", &refs, &scorer).unwrap();

        prop_assert_eq!(out.pass_count, cfg.pass_count(n));
        prop_assert_eq!(out.trace.len(), out.pass_count);
        prop_assert_eq!(out.k_q, out.retrieved.len());
        prop_assert_eq!(out.threshold_rank, out.k_q + 1);

        let ids: BTreeSet<&String> = tables.iter().map(|t| &t.table_id).collect();
        let ranked: BTreeSet<&String> = out.ranking.iter().collect();
        prop_assert_eq!(ranked.len(), n, "ranking has duplicates");
        prop_assert_eq!(&ranked, &ids, "ranking is not a permutation of the candidates");
        prop_assert_eq!(&out.ranking[..out.k_q], &out.retrieved[..]);

        // Every table is fixed by exactly one pass or survives to the end.
        let dropped: usize = out.trace.iter().map(|p| p.dropped.len()).sum();
        prop_assert_eq!(dropped + out.trace.last().unwrap().retained.len(), n);
        for pass in &out.trace {
            prop_assert!(pass.window.len() <= w);
            prop_assert_eq!(pass.window.len(), pass.table_logits.len());
            prop_assert!(pass.retained.len() <= r);
        }
        prop_assert_eq!(out.max_window_tokens, out.trace.iter().map(|p| p.window_tokens).max().unwrap());
    }

    #[test]
    fn mock_is_window_independent(
        (logits, thr, _w, _r) in case(),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..6),
    ) {
        let tables = numbered_tables(logits.len());
        let scorer = mock_for(&tables, &logits, thr);
        let window: Vec<&TableRecord> = picks.iter().map(|i| &tables[i.index(tables.len())]).collect();
        let mut seen = BTreeSet::new();
        let window: Vec<&TableRecord> = window.into_iter().filter(|t| seen.insert(&t.table_id)).collect();
        let request = ScoreRequest::new("q", window.clone(), &RequestLimits::default()).unwrap();
        let response = scorer.score(&request).unwrap();
        prop_assert_eq!(response.threshold_logit, thr);
        for (t, x) in window.iter().zip(&response.table_logits) {
            let pos = tables.iter().position(|u| u.table_id == t.table_id).unwrap();
            prop_assert_eq!(*x, logits[pos]);
        }
    }
}

#[test]
fn ties_break_by_initial_rank() {
    let tables = numbered_tables(6);
    let refs: Vec<&TableRecord> = tables.iter().collect();
    let scorer = mock_for(&tables, &[1.0, 2.0, 1.0, 2.0, 0.5, 1.0], 1.0);
    let out = Reranker::new(WindowConfig::new(3, 1).unwrap()).rerank("q", &refs, &scorer).unwrap();
    // Tables equal to the threshold stay out; the two 2.0s keep initial order.
    assert_eq!(out.retrieved, ["db.c2", "db.c4"]);
}
