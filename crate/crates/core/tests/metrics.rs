mod common;

use adt_rec::eval::{ndcg_at_k, rank_items, recall_at_k};
use proptest::prelude::*;

#[test]
fn metrics_match_exhaustive_oracle() {
    let (cases, worst) = common::exhaustive_metric_check(5, 3);
    assert!(cases > 10_000);
    assert!(worst <= 1e-12, "worst deviation {worst:e}");
}

#[test]
fn empty_relevant_set_is_undefined() {
    assert_eq!(recall_at_k(&[0, 1], &[], 2), None);
    assert_eq!(ndcg_at_k(&[0, 1], &[], 2), None);
}

proptest! {
    #[test]
    fn ranking_matches_full_sort(
        scores in prop::collection::vec(-3i32..3, 1..30),
        exclude_mask in prop::collection::vec(any::<bool>(), 30),
        k in 0usize..30,
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let exclude: Vec<u32> = (0..scores.len() as u32).filter(|&i| exclude_mask[i as usize]).collect();
        let mut expect: Vec<u32> = (0..scores.len() as u32).filter(|i| !exclude.contains(i)).collect();
        expect.sort_by(|&a, &b| scores[b as usize].partial_cmp(&scores[a as usize]).unwrap().then(a.cmp(&b)));
        if k > expect.len() {
            prop_assert!(rank_items(&scores, &exclude, k).is_err());
        } else {
            expect.truncate(k);
            prop_assert_eq!(rank_items(&scores, &exclude, k).unwrap(), expect);
        }
    }

    #[test]
    fn metrics_are_bounded_and_monotone_in_k(
        perm_seed in any::<u64>(),
        n in 1usize..12,
        rel_mask in prop::collection::vec(any::<bool>(), 12),
    ) {
        use rand::seq::SliceRandom;
        let mut ranked: Vec<u32> = (0..n as u32).collect();
        ranked.shuffle(&mut adt_rec::rng::stream(perm_seed, 0));
        let relevant: Vec<u32> = (0..n as u32).filter(|&i| rel_mask[i as usize]).collect();
        prop_assume!(!relevant.is_empty());
        let mut prev = 0.0;
        for k in 1..=n {
            let r = recall_at_k(&ranked, &relevant, k).unwrap();
            let g = ndcg_at_k(&ranked, &relevant, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&g));
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert!((recall_at_k(&ranked, &relevant, n).unwrap() - 1.0).abs() < 1e-15);
    }
}
