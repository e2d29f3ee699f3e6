//! Ranking metrics against brute-force recomputation.

mod support;

use std::collections::{BTreeMap, BTreeSet};

use dmr_core::evaluation::{
    auc, diversity_at_n, evaluate, f1_at_n, precision_at_n, recall_at_n, CandidatePool, EvalConfig,
    RankedList, Scorer,
};
use dmr_core::{ItemId, UserId};
use proptest::prelude::*;
use support::{check_metrics, metric_fixture, oracle_metrics, oracle_ranking, MetricFixture};

#[test]
fn metrics_match_oracle_on_200_fixtures() {
    let worst = check_metrics(200).unwrap();
    assert!(worst <= 1e-12, "worst difference {worst:.3e}");
}

#[test]
fn f1_of_0_323_and_0_478_truncates_to_0_385() {
    let f1 = f1_at_n(0.323, 0.478);
    assert!((f1 - 0.385_503_121).abs() < 1e-9);
    assert_eq!((f1 * 1000.0).floor() / 1000.0, 0.385);
}

/// Deterministic pseudo-scores; declines users divisible by seven.
struct HashScorer;

fn pseudo_score(user: UserId, item: ItemId) -> f64 {
    let h = (u64::from(user.0) * 2_654_435_761 + u64::from(item.0) * 40_503) % 1009;
    (h % 37) as f64 / 7.0
}

impl Scorer for HashScorer {
    fn score(&self, user: UserId, candidates: &[ItemId]) -> Option<Vec<f64>> {
        (!user.0.is_multiple_of(7))
            .then(|| candidates.iter().map(|&i| pseudo_score(user, i)).collect())
    }
}

#[test]
fn evaluate_macro_averages_match_brute_force_on_20_users() {
    let categories: BTreeMap<ItemId, u32> = (0..300).map(|i| (ItemId(i), i % 6)).collect();
    let pools: Vec<CandidatePool> = (0..20u32)
        .map(|u| {
            let f = metric_fixture(500 + u64::from(u));
            let relevant = if u == 3 { BTreeSet::new() } else { f.relevant };
            CandidatePool {
                user: UserId(u),
                candidates: f.items,
                relevant,
            }
        })
        .collect();
    let config = EvalConfig {
        n: 5,
        pool_size: 0,
        seed: 0,
    };
    let report = evaluate(&HashScorer, &pools, &categories, &config).unwrap();

    let mut per_user = Vec::new();
    for p in &pools {
        if p.relevant.is_empty() || p.relevant.len() == p.candidates.len() || p.user.0 % 7 == 0 {
            continue;
        }
        let scores: Vec<f64> = p
            .candidates
            .iter()
            .map(|&i| pseudo_score(p.user, i))
            .collect();
        let at = |n: usize| {
            oracle_metrics(&MetricFixture {
                items: p.candidates.clone(),
                scores: scores.clone(),
                relevant: p.relevant.clone(),
                categories: categories.clone(),
                n,
            })
        };
        per_user.push((at(5), at(10), at(50), at(100)));
    }
    assert_eq!(report.users_evaluated, per_user.len());
    assert_eq!(report.users_skipped, pools.len() - per_user.len());
    let k = per_user.len() as f64;
    let precision = per_user.iter().map(|m| m.0.precision).sum::<f64>() / k;
    let recall = per_user.iter().map(|m| m.0.recall).sum::<f64>() / k;
    let auc_mean = per_user.iter().map(|m| m.0.auc).sum::<f64>() / k;
    assert!((report.precision - precision).abs() <= 1e-12);
    assert!((report.recall - recall).abs() <= 1e-12);
    assert!((report.auc - auc_mean).abs() <= 1e-12);
    assert!((report.f1 - 2.0 * precision * recall / (precision + recall)).abs() <= 1e-12);
    let cutoffs: Vec<usize> = report.diversity_at.iter().map(|x| x.0).collect();
    assert_eq!(cutoffs, vec![5, 10, 50, 100]);
    let div = [
        per_user.iter().map(|m| m.0.diversity).sum::<f64>() / k,
        per_user.iter().map(|m| m.1.diversity).sum::<f64>() / k,
        per_user.iter().map(|m| m.2.diversity).sum::<f64>() / k,
        per_user.iter().map(|m| m.3.diversity).sum::<f64>() / k,
    ];
    for ((_, got), want) in report.diversity_at.iter().zip(div) {
        assert!((got - want).abs() <= 1e-12);
    }
    assert_eq!(report.diversity, report.diversity_at[0].1);
}

fn scored_items() -> impl Strategy<Value = (Vec<ItemId>, Vec<f64>)> {
    proptest::collection::btree_set(0u32..500, 2..30).prop_flat_map(|ids| {
        let n = ids.len();
        (
            Just(ids.into_iter().map(ItemId).collect::<Vec<_>>()),
            proptest::collection::vec(-20i32..20, n)
                .prop_map(|v| v.into_iter().map(f64::from).collect()),
        )
    })
}

proptest! {
    #[test]
    fn auc_is_invariant_under_increasing_maps(
        pos in proptest::collection::vec(-50i32..50, 1..20),
        neg in proptest::collection::vec(-50i32..50, 1..20),
        shift in -5.0f64..5.0,
    ) {
        let p: Vec<f64> = pos.iter().map(|&x| f64::from(x)).collect();
        let q: Vec<f64> = neg.iter().map(|&x| f64::from(x)).collect();
        let f = |x: f64| (x / 10.0).exp() + shift;
        let pm: Vec<f64> = p.iter().map(|&x| f(x)).collect();
        let qm: Vec<f64> = q.iter().map(|&x| f(x)).collect();
        let a = auc(&p, &q).unwrap();
        prop_assert!((a - auc(&pm, &qm).unwrap()).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        // swapping roles mirrors the value
        prop_assert!((a + auc(&q, &p).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn diversity_ignores_input_order((items, scores) in scored_items(), seed in 0u64..1000) {
        let cats: BTreeMap<ItemId, u32> = items.iter().map(|i| (*i, i.0 % 4)).collect();
        let a = RankedList::from_scores(UserId(0), &items, &scores).unwrap();
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.sort_by_key(|&k| (k as u64 * 7919 + seed) % 101);
        let items2: Vec<ItemId> = order.iter().map(|&k| items[k]).collect();
        let scores2: Vec<f64> = order.iter().map(|&k| scores[k]).collect();
        let b = RankedList::from_scores(UserId(0), &items2, &scores2).unwrap();
        prop_assert_eq!(&a.items, &b.items);
        prop_assert_eq!(&a.items, &oracle_ranking(&items, &scores));
        for n in [2, 5, 10] {
            prop_assert_eq!(diversity_at_n(&a, &cats, n).unwrap(), diversity_at_n(&b, &cats, n).unwrap());
        }
    }

    #[test]
    fn hit_counts_tie_precision_and_recall((items, scores) in scored_items(), mask in proptest::collection::vec(proptest::bool::ANY, 30), n in 1usize..40) {
        let relevant: BTreeSet<ItemId> = items.iter().zip(&mask).filter(|(_, &m)| m).map(|(i, _)| *i).collect();
        prop_assume!(!relevant.is_empty());
        let ranked = RankedList::from_scores(UserId(0), &items, &scores).unwrap();
        let p = precision_at_n(&ranked, &relevant, n).unwrap();
        let r = recall_at_n(&ranked, &relevant, n);
        // both are views of the same hit count
        prop_assert!((p * n as f64 - r * relevant.len() as f64).abs() <= 1e-9);
        let hits = ranked.top(n).iter().filter(|i| relevant.contains(i)).count();
        prop_assert!(hits <= n.min(relevant.len()));
        if n >= items.len() {
            prop_assert!((r - 1.0).abs() <= 1e-12);
        }
    }
}
