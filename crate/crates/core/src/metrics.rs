//! Full-ranking top-N evaluation, head/tail slicing and embedding export.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Interaction, InteractionDataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Scores every item for a user.
pub trait Scorer: Sync {
    fn num_users(&self) -> usize;
    fn num_items(&self) -> usize;
    /// Writes one score per item into `out` (length [`Scorer::num_items`]).
    fn score_user(&self, user: u32, out: &mut [f64]);
}

fn check_relevant(relevant: &HashSet<u32>) -> Result<()> {
    if relevant.is_empty() {
        Err(Error::InvalidArgument("relevant set is empty".into()))
    } else {
        Ok(())
    }
}

/// `|top-n ∩ relevant| / |relevant|`.
pub fn recall_at_n(ranked: &[u32], relevant: &HashSet<u32>, n: usize) -> Result<f64> {
    check_relevant(relevant)?;
    let hits = ranked.iter().take(n).filter(|i| relevant.contains(i)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG with discount `log₂(k + 1)` at 1-indexed position `k`.
pub fn ndcg_at_n(ranked: &[u32], relevant: &HashSet<u32>, n: usize) -> Result<f64> {
    check_relevant(relevant)?;
    let dcg: f64 = ranked
        .iter()
        .take(n)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(k, _)| 1.0 / ((k + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(n))
        .map(|k| 1.0 / ((k + 2) as f64).log2())
        .sum();
    Ok(dcg / ideal)
}

/// Items by descending train popularity (ties by ascending id); the head is
/// the first `⌈f·N⌉`, the tail the last `⌈f·N⌉` that are not in the head.
pub fn head_tail_split(ds: &InteractionDataset, fraction: f64) -> Result<(BTreeSet<u32>, BTreeSet<u32>)> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::InvalidArgument(format!(
            "tail fraction must lie in (0, 0.5], got {fraction}"
        )));
    }
    let pop = ds.item_popularity();
    let mut order: Vec<u32> = (0..pop.len() as u32).collect();
    order.sort_by(|&a, &b| pop[b as usize].cmp(&pop[a as usize]).then(a.cmp(&b)));
    let k = (fraction * pop.len() as f64).ceil() as usize;
    let head: BTreeSet<u32> = order[..k.min(order.len())].iter().copied().collect();
    let tail: BTreeSet<u32> = order[order.len().saturating_sub(k)..]
        .iter()
        .copied()
        .filter(|i| !head.contains(i))
        .collect();
    Ok((head, tail))
}

/// Which held-out split to rank against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// Rank validation items, masking train positives.
    Validation,
    /// Rank test items, masking train and validation positives.
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SliceMetrics {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub num_users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// `head`, `tail` and `all`.
    pub per_slice: BTreeMap<String, SliceMetrics>,
    pub num_evaluated_users: usize,
}

/// Top `k` unmasked items by descending score, ties by ascending id.
pub fn top_k(scores: &[f64], masked: &[u32], k: usize) -> Vec<u32> {
    let blocked: HashSet<u32> = masked.iter().copied().collect();
    let mut cand: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| !blocked.contains(i))
        .collect();
    let key = |i: u32| {
        let s = scores[i as usize];
        if s.is_nan() {
            f64::NEG_INFINITY
        } else {
            s
        }
    };
    let cmp = |a: &u32, b: &u32| key(*b).total_cmp(&key(*a)).then(a.cmp(b));
    if k < cand.len() {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand
}

struct UserResult {
    metrics: [Option<(Vec<f64>, Vec<f64>)>; 3],
}

/// Full-ranking Recall@N and NDCG@N averaged over users with held-out items.
///
/// Slice metrics use only the held-out items inside the slice, averaged over
/// users that have at least one such item.
pub fn evaluate_ranking(
    scorer: &dyn Scorer,
    ds: &InteractionDataset,
    cutoffs: &[usize],
    tail_fraction: f64,
    target: Target,
) -> Result<EvalReport> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::InvalidArgument("cutoffs must be positive".into()));
    }
    if scorer.num_items() != ds.num_items() || scorer.num_users() != ds.num_users() {
        return Err(Error::shape(
            "evaluate_ranking",
            "scorer and dataset disagree on user/item counts",
        ));
    }
    let (head, tail) = head_tail_split(ds, tail_fraction)?;
    let train = ds.by_user(ds.train());
    let val = ds.by_user(ds.val());
    let (held, masks): (Vec<Vec<u32>>, Vec<Vec<u32>>) = match target {
        Target::Validation => (val, train),
        Target::Test => {
            let mask = train
                .into_iter()
                .zip(val)
                .map(|(mut t, v)| {
                    t.extend(v);
                    t
                })
                .collect();
            (ds.by_user(ds.test()), mask)
        }
    };
    let kmax = *cutoffs.iter().max().expect("nonempty");
    let n_items = ds.num_items();
    let results: Vec<Option<UserResult>> = (0..ds.num_users())
        .into_par_iter()
        .map(|u| {
            if held[u].is_empty() {
                return None;
            }
            let mut scores = vec![0.0; n_items];
            scorer.score_user(u as u32, &mut scores);
            let ranked = top_k(&scores, &masks[u], kmax);
            let slice = |keep: &dyn Fn(u32) -> bool| {
                let rel: HashSet<u32> = held[u].iter().copied().filter(|&i| keep(i)).collect();
                if rel.is_empty() {
                    return None;
                }
                let r = cutoffs.iter().map(|&n| recall_at_n(&ranked, &rel, n).expect("nonempty"));
                let g = cutoffs.iter().map(|&n| ndcg_at_n(&ranked, &rel, n).expect("nonempty"));
                Some((r.collect(), g.collect()))
            };
            Some(UserResult {
                metrics: [
                    slice(&|i| head.contains(&i)),
                    slice(&|i| tail.contains(&i)),
                    slice(&|_| true),
                ],
            })
        })
        .collect();

    let mut per_slice = BTreeMap::new();
    for (s, name) in ["head", "tail", "all"].iter().enumerate() {
        let mut sum_r = vec![0.0; cutoffs.len()];
        let mut sum_g = vec![0.0; cutoffs.len()];
        let mut count = 0usize;
        for res in results.iter().flatten() {
            if let Some((r, g)) = &res.metrics[s] {
                count += 1;
                for k in 0..cutoffs.len() {
                    sum_r[k] += r[k];
                    sum_g[k] += g[k];
                }
            }
        }
        let avg = |v: &[f64]| -> BTreeMap<usize, f64> {
            cutoffs
                .iter()
                .zip(v)
                .map(|(&n, &x)| (n, if count == 0 { 0.0 } else { x / count as f64 }))
                .collect()
        };
        per_slice.insert(
            name.to_string(),
            SliceMetrics {
                recall: avg(&sum_r),
                ndcg: avg(&sum_g),
                num_users: count,
            },
        );
    }
    let all = per_slice["all"].clone();
    Ok(EvalReport {
        recall: all.recall,
        ndcg: all.ndcg,
        num_evaluated_users: all.num_users,
        per_slice,
    })
}

/// Deterministic pseudo-random scores, a stand-in for an untrained model.
#[derive(Clone, Debug)]
pub struct RandomScorer {
    pub num_users: usize,
    pub num_items: usize,
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn num_users(&self) -> usize {
        self.num_users
    }

    fn num_items(&self) -> usize {
        self.num_items
    }

    fn score_user(&self, user: u32, out: &mut [f64]) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
            self.seed ^ (user as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        out.iter_mut().for_each(|o| *o = rng.random::<f64>());
    }
}

/// Scores 1 for the given pairs and 0 elsewhere.
#[derive(Clone, Debug)]
pub struct OracleScorer {
    relevant: Vec<HashSet<u32>>,
    num_items: usize,
}

impl OracleScorer {
    pub fn new(num_users: usize, num_items: usize, pairs: &[Interaction]) -> Self {
        let mut relevant = vec![HashSet::new(); num_users];
        for &(u, i) in pairs {
            relevant[u as usize].insert(i);
        }
        Self {
            relevant,
            num_items,
        }
    }
}

impl Scorer for OracleScorer {
    fn num_users(&self) -> usize {
        self.relevant.len()
    }

    fn num_items(&self) -> usize {
        self.num_items
    }

    fn score_user(&self, user: u32, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = if self.relevant[user as usize].contains(&(i as u32)) {
                1.0
            } else {
                0.0
            };
        }
    }
}

/// Writes `item_id, label, popularity, e0..` rows (one per item, after a header).
pub fn export_embeddings<T: Scalar>(
    item_embeddings: &Matrix<T>,
    ds: &InteractionDataset,
    tail_fraction: f64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if item_embeddings.rows() != ds.num_items() {
        return Err(Error::shape(
            "export_embeddings",
            format!("{} rows for {} items", item_embeddings.rows(), ds.num_items()),
        ));
    }
    let (head, tail) = head_tail_split(ds, tail_fraction)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(w, "item_id\tlabel\tpopularity").map_err(io)?;
    for c in 0..item_embeddings.cols() {
        write!(w, "\te{c}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for i in 0..ds.num_items() {
        let id = i as u32;
        let label = if head.contains(&id) {
            "head"
        } else if tail.contains(&id) {
            "tail"
        } else {
            "mid"
        };
        write!(w, "{i}\t{label}\t{}", ds.item_popularity()[i]).map_err(io)?;
        for &x in item_embeddings.row(i) {
            write!(w, "\t{}", x.to_f64_lossy()).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[u32]) -> HashSet<u32> {
        items.iter().copied().collect()
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_n(&[0, 2], &set(&[0, 1]), 2).unwrap(), 0.5);
        assert_eq!(recall_at_n(&[1, 0, 5], &set(&[0, 1]), 2).unwrap(), 1.0);
        assert_eq!(recall_at_n(&[3, 4, 0], &set(&[0, 1]), 2).unwrap(), 0.0);
        assert!(recall_at_n(&[0], &set(&[]), 1).is_err());
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_n(&[7, 1, 2], &set(&[7]), 3).unwrap(), 1.0);
        let v = ndcg_at_n(&[0, 9, 1], &set(&[0, 1]), 3).unwrap();
        let want = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.9197).abs() < 1e-4);
        assert_eq!(ndcg_at_n(&[3, 4], &set(&[0]), 2).unwrap(), 0.0);
        assert!(ndcg_at_n(&[0], &set(&[]), 1).is_err());
    }

    #[test]
    fn top_k_masks_and_breaks_ties_by_id() {
        let scores = [0.5, 0.9, 0.5, 0.9, 0.1];
        assert_eq!(top_k(&scores, &[], 3), vec![1, 3, 0]);
        assert_eq!(top_k(&scores, &[1], 3), vec![3, 0, 2]);
        assert_eq!(top_k(&scores, &[], 10).len(), 5);
    }

    fn counts_dataset(counts: &[usize]) -> InteractionDataset {
        let users = *counts.iter().max().unwrap();
        let mut pairs = Vec::new();
        for (i, &c) in counts.iter().enumerate() {
            for u in 0..c {
                pairs.push((u as u32, i as u32));
            }
        }
        InteractionDataset::new(users.max(1), counts.len(), pairs).unwrap()
    }

    #[test]
    fn head_tail_examples() {
        let ds = counts_dataset(&[3, 9, 1, 5, 8, 2, 7, 6, 4, 10]);
        let (h, t) = head_tail_split(&ds, 0.1).unwrap();
        assert_eq!(h, BTreeSet::from([9]));
        assert_eq!(t, BTreeSet::from([2]));

        let ds = counts_dataset(&[2; 15]);
        let (h, t) = head_tail_split(&ds, 0.1).unwrap();
        assert_eq!(h, BTreeSet::from([0, 1]));
        assert_eq!(t, BTreeSet::from([13, 14]));

        let ds = counts_dataset(&[1, 2, 3, 4, 5]);
        let (h, t) = head_tail_split(&ds, 0.5).unwrap();
        assert!(h.is_disjoint(&t));
        assert_eq!(h.len(), 3);
        assert!(head_tail_split(&ds, 0.6).is_err());
        assert!(head_tail_split(&ds, 0.0).is_err());
    }
}
