use std::collections::HashSet;

use kgrec::data::{gen_synthetic_longtail, split_dataset};
use kgrec::metrics::{
    evaluate_ranking, export_embeddings, head_tail_split, ndcg_at_n, recall_at_n, top_k, OracleScorer,
    RandomScorer,
};
use kgrec::{InteractionDataset, Matrix, Scorer, SyntheticSpec, Target};
use proptest::prelude::*;

fn synthetic() -> InteractionDataset {
    let (ds, _) = gen_synthetic_longtail(&SyntheticSpec::default()).unwrap();
    split_dataset(&ds, 7)
}

#[test]
fn worked_examples() {
    let rel: HashSet<u32> = [1, 2].into();
    assert_eq!(recall_at_n(&[1, 3], &rel, 2).unwrap(), 0.5);
    assert_eq!(recall_at_n(&[2, 1, 5], &rel, 3).unwrap(), 1.0);
    assert_eq!(recall_at_n(&[4, 5, 1], &rel, 2).unwrap(), 0.0);
    let one: HashSet<u32> = [7].into();
    assert_eq!(ndcg_at_n(&[7, 1], &one, 2).unwrap(), 1.0);
    let want = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
    assert!((ndcg_at_n(&[1, 9, 2], &rel, 3).unwrap() - want).abs() < 1e-9);
    assert_eq!(ndcg_at_n(&[8, 9], &rel, 2).unwrap(), 0.0);
    assert!(recall_at_n(&[1], &HashSet::new(), 1).is_err());
}

/// Mean and standard error of Recall@k under uniform random ranking: each
/// user's hits follow a hypergeometric law over its unmasked candidates.
fn uniform_band(ds: &InteractionDataset, k: usize) -> (f64, f64) {
    let train = ds.by_user(ds.train());
    let val = ds.by_user(ds.val());
    let test = ds.by_user(ds.test());
    let (mut mean, mut var, mut users) = (0.0, 0.0, 0usize);
    for u in 0..ds.num_users() {
        let r = test[u].len() as f64;
        if r == 0.0 {
            continue;
        }
        let c = (ds.num_items() - train[u].len() - val[u].len()) as f64;
        let n = (k as f64).min(c);
        mean += n / c;
        var += n * r * (c - r) * (c - n) / (c * c * (c - 1.0).max(1.0)) / (r * r);
        users += 1;
    }
    let u = users as f64;
    (mean / u, var.sqrt() / u)
}

#[test]
fn random_scorer_falls_in_uniform_ranking_band() {
    let ds = synthetic();
    let (mean, se) = uniform_band(&ds, 20);
    assert!((mean - 20.0 / 300.0).abs() < 0.01);
    for seed in 0..3 {
        let s = RandomScorer {
            num_users: ds.num_users(),
            num_items: ds.num_items(),
            seed,
        };
        let rep = evaluate_ranking(&s, &ds, &[20], 0.1, Target::Test).unwrap();
        let r = rep.recall[&20];
        assert!((r - mean).abs() <= 3.0 * se, "seed {seed}: {r} vs {mean} ± 3·{se}");
    }
}

#[test]
fn oracle_scorer_is_perfect() {
    let ds = synthetic();
    let s = OracleScorer::new(ds.num_users(), ds.num_items(), ds.test());
    let rep = evaluate_ranking(&s, &ds, &[10, 20], 0.1, Target::Test).unwrap();
    let test = ds.by_user(ds.test());
    assert!(test.iter().all(|t| t.len() <= 10));
    assert_eq!(rep.recall[&10], 1.0);
    assert_eq!(rep.recall[&20], 1.0);
    assert!((rep.ndcg[&20] - 1.0).abs() < 1e-12);
    assert_eq!(rep.num_evaluated_users, test.iter().filter(|t| !t.is_empty()).count());
}

/// Prefers training positives, which the mask must hide.
struct TrainLover(OracleScorer);

impl Scorer for TrainLover {
    fn num_users(&self) -> usize {
        self.0.num_users()
    }
    fn num_items(&self) -> usize {
        self.0.num_items()
    }
    fn score_user(&self, user: u32, out: &mut [f64]) {
        self.0.score_user(user, out);
    }
}

#[test]
fn masked_items_never_reach_the_top() {
    let ds = synthetic();
    let lover = TrainLover(OracleScorer::new(ds.num_users(), ds.num_items(), ds.train()));
    let rep = evaluate_ranking(&lover, &ds, &[20], 0.1, Target::Test).unwrap();
    assert!(rep.recall[&20] < 0.5);

    let train = ds.by_user(ds.train());
    let val = ds.by_user(ds.val());
    let mut scores = vec![0.0; ds.num_items()];
    for u in 0..ds.num_users() {
        lover.score_user(u as u32, &mut scores);
        let mut masked: Vec<u32> = train[u].iter().chain(&val[u]).copied().collect();
        masked.sort_unstable();
        let top = top_k(&scores, &masked, 20);
        assert!(top.iter().all(|i| masked.binary_search(i).is_err()));
    }
}

#[test]
fn report_values_are_bounded_and_recall_grows_with_cutoff() {
    let ds = synthetic();
    let s = RandomScorer {
        num_users: ds.num_users(),
        num_items: ds.num_items(),
        seed: 1,
    };
    let rep = evaluate_ranking(&s, &ds, &[5, 10, 20, 50], 0.1, Target::Validation).unwrap();
    let r: Vec<f64> = rep.recall.values().copied().collect();
    assert!(r.windows(2).all(|w| w[0] <= w[1]));
    for slice in rep.per_slice.values() {
        for v in slice.recall.values().chain(slice.ndcg.values()) {
            assert!((0.0..=1.0).contains(v));
        }
    }
    assert_eq!(rep.per_slice.len(), 3);
    assert_eq!(rep.per_slice["all"].recall, rep.recall);
}

proptest! {
    #[test]
    fn head_and_tail_are_disjoint_and_sized(
        counts in prop::collection::vec(1u32..6, 2..40),
        fraction in 0.01f64..=0.5,
    ) {
        let n = counts.len();
        let mut pairs = Vec::new();
        for (i, &c) in counts.iter().enumerate() {
            for u in 0..c {
                pairs.push((u, i as u32));
            }
        }
        let ds = InteractionDataset::new(6, n, pairs).unwrap();
        let (head, tail) = head_tail_split(&ds, fraction).unwrap();
        let k = (fraction * n as f64).ceil() as usize;
        prop_assert_eq!(head.len(), k);
        prop_assert!(head.is_disjoint(&tail));
        let pop = ds.item_popularity();
        let min_head = head.iter().map(|&i| pop[i as usize]).min().unwrap();
        let others = (0..n as u32).filter(|i| !head.contains(i));
        for i in others {
            prop_assert!(pop[i as usize] <= min_head);
        }
    }
}

#[test]
fn export_writes_one_row_per_item_and_is_repeatable() {
    let ds = InteractionDataset::new(2, 3, vec![(0, 0), (1, 0), (0, 1)]).unwrap();
    let emb = Matrix::from_rows(&[vec![0.5, 1.0], vec![-1.0, 0.0], vec![0.0, 2.0]]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    export_embeddings(&emb, &ds, 0.34, &a).unwrap();
    export_embeddings(&emb, &ds, 0.34, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("item_id\tlabel\tpopularity"));
    assert!(lines[1].starts_with("0\thead\t2\t"));
    assert!(lines[3].starts_with("2\ttail\t0\t"));
}
