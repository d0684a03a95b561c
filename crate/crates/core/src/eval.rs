//! Top-K ranking evaluation against the clean test partition, plus the
//! truncation diagnostics and activity-based user grouping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::DropRecord;

/// Anything that produces a score for every item of a user.
pub trait Scorer: Sync {
    fn n_items(&self) -> usize;
    fn score_all(&self, user: u32) -> Result<Vec<f64>>;
}

impl Scorer for Model {
    fn n_items(&self) -> usize {
        Model::n_items(self)
    }

    fn score_all(&self, user: u32) -> Result<Vec<f64>> {
        self.predict_all(user)
    }
}

/// The `k` best items by descending score, skipping `exclude` (sorted).
/// Equal scores rank the lower item index first.
pub fn rank_items(scores: &[f64], exclude: &[u32], k: usize) -> Result<Vec<u32>> {
    let available = scores.len() - exclude.iter().filter(|&&i| (i as usize) < scores.len()).count();
    if k > available {
        return Err(Error::InvalidArgument(format!(
            "cannot rank {k} items, only {available} remain after exclusion"
        )));
    }
    let mut candidates: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let cmp = |a: &u32, b: &u32| {
        scores[*b as usize]
            .total_cmp(&scores[*a as usize])
            .then(a.cmp(b))
    };
    if k < candidates.len() && k > 0 {
        candidates.select_nth_unstable_by(k - 1, cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(cmp);
    candidates.truncate(k);
    Ok(candidates)
}

/// `|top-k ∩ relevant| / |relevant|`, or `None` when nothing is relevant.
pub fn recall_at_k(ranked: &[u32], relevant: &[u32], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG with gain `1 / log2(rank + 1)`; the ideal ranking
/// places `min(k, |relevant|)` hits on top.
pub fn ndcg_at_k(ranked: &[u32], relevant: &[u32], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| discount(r + 1))
        .sum();
    let ideal: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    Some(if ideal > 0.0 { dcg / ideal } else { 0.0 })
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAtK {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

pub const SKIP_POLICY: &str = "users without clean test items are skipped";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Vec<MetricAtK>,
    pub users_evaluated: usize,
    pub users_skipped: usize,
    pub skip_policy: String,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&MetricAtK> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |m| m.ndcg)
    }
}

/// Averages Recall@K and NDCG@K over test users with at least one clean
/// test item. Training positives are never ranked.
pub fn evaluate(scorer: &dyn Scorer, dataset: &Dataset, ks: &[usize]) -> Result<EvalReport> {
    if dataset.test.is_empty() {
        return Err(Error::Empty("test partition".into()));
    }
    evaluate_users(scorer, dataset, &dataset.test_items(), None, ks)
}

/// Like [`evaluate`] with explicit relevance lists and an optional user
/// subset.
pub fn evaluate_users(
    scorer: &dyn Scorer,
    dataset: &Dataset,
    relevant: &[Vec<u32>],
    users: Option<&[u32]>,
    ks: &[usize],
) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("cutoffs must be positive".into()));
    }
    let k_max = *ks.iter().max().unwrap();
    let all: Vec<u32>;
    let users = match users {
        Some(u) => u,
        None => {
            all = (0..dataset.n_users as u32).collect();
            &all
        }
    };
    let per_user: Vec<Option<Vec<(f64, f64)>>> = users
        .par_iter()
        .map(|&u| -> Result<Option<Vec<(f64, f64)>>> {
            let rel = &relevant[u as usize];
            if rel.is_empty() {
                return Ok(None);
            }
            let scores = scorer.score_all(u)?;
            let ranked = rank_items(&scores, dataset.user_pos(u), k_max)?;
            Ok(Some(
                ks.iter()
                    .map(|&k| (recall_at_k(&ranked, rel, k).unwrap(), ndcg_at_k(&ranked, rel, k).unwrap()))
                    .collect(),
            ))
        })
        .collect::<Result<_>>()?;

    let evaluated: Vec<&Vec<(f64, f64)>> = per_user.iter().flatten().collect();
    let n = evaluated.len();
    let metrics = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let (r, g) = evaluated
                .iter()
                .fold((0.0, 0.0), |(r, g), m| (r + m[j].0, g + m[j].1));
            let denom = n.max(1) as f64;
            MetricAtK { k, recall: r / denom, ndcg: g / denom }
        })
        .collect();
    Ok(EvalReport {
        metrics,
        users_evaluated: n,
        users_skipped: users.len() - n,
        skip_policy: SKIP_POLICY.to_string(),
    })
}

/// Splits test users into `n_groups` activity bands of roughly equal total
/// training interactions, lightest users first. Ties order by user index.
pub fn group_users_by_activity(dataset: &Dataset, n_groups: usize) -> Result<Vec<Vec<u32>>> {
    let test = dataset.test_items();
    let counts = dataset.train_counts();
    let users: Vec<u32> = (0..dataset.n_users as u32)
        .filter(|&u| !test[u as usize].is_empty())
        .collect();
    group_by_counts(&users, &counts, n_groups)
}

pub(crate) fn group_by_counts(users: &[u32], counts: &[usize], n_groups: usize) -> Result<Vec<Vec<u32>>> {
    if n_groups < 2 {
        return Err(Error::InvalidArgument("need at least two groups".into()));
    }
    if users.len() < n_groups {
        return Err(Error::InvalidArgument(format!(
            "{} users cannot fill {n_groups} groups",
            users.len()
        )));
    }
    let mut sorted = users.to_vec();
    sorted.sort_by_key(|&u| (counts[u as usize], u));
    let total: usize = sorted.iter().map(|&u| counts[u as usize]).sum();
    let mut groups = vec![Vec::new(); n_groups];
    let mut before = 0usize;
    for u in sorted {
        let g = if total == 0 { 0 } else { (before * n_groups / total).min(n_groups - 1) };
        groups[g].push(u);
        before += counts[u as usize];
    }
    Ok(groups)
}

/// Truncation quality for one epoch of T-CE training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseRow {
    pub epoch: usize,
    pub mean_epsilon: f64,
    pub positives_seen: usize,
    pub false_positives_seen: usize,
    pub dropped: usize,
    pub dropped_false_positives: usize,
    /// Share of false positives fed this epoch that were dropped.
    pub recall: f64,
    /// Share of dropped interactions that were false positives; 0 when
    /// nothing was dropped (see `precision_defined`).
    pub precision: f64,
    pub precision_defined: bool,
    /// Random discarding: recall equals the drop rate.
    pub baseline_recall: f64,
    /// Random discarding: precision equals the false-positive share of the
    /// batches.
    pub baseline_precision: f64,
}

/// Per-epoch denoising recall and precision from a T-CE drop log. Drop-log
/// indices refer to `dataset.train`.
pub fn denoise_precision_recall(drop_log: &[DropRecord], dataset: &Dataset) -> Result<Vec<DenoiseRow>> {
    if !dataset.has_noise_flags() {
        return Err(Error::InvalidArgument("denoising diagnostics need noise flags".into()));
    }
    let is_fp = |k: u32| -> Result<bool> {
        dataset
            .train
            .get(k as usize)
            .map(|r| r.is_false_positive())
            .ok_or(Error::OutOfRange { what: "train record", index: k as usize, bound: dataset.train.len() })
    };
    let mut rows: Vec<DenoiseRow> = Vec::new();
    let mut eps_sum = 0.0;
    let mut iters = 0usize;
    for rec in drop_log {
        if rows.last().is_none_or(|r| r.epoch != rec.epoch) {
            finish_row(rows.last_mut(), eps_sum, iters);
            eps_sum = 0.0;
            iters = 0;
            rows.push(DenoiseRow {
                epoch: rec.epoch,
                mean_epsilon: 0.0,
                positives_seen: 0,
                false_positives_seen: 0,
                dropped: 0,
                dropped_false_positives: 0,
                recall: 0.0,
                precision: 0.0,
                precision_defined: false,
                baseline_recall: 0.0,
                baseline_precision: 0.0,
            });
        }
        let row = rows.last_mut().unwrap();
        eps_sum += rec.epsilon;
        iters += 1;
        row.positives_seen += rec.positives.len();
        for &k in &rec.positives {
            row.false_positives_seen += usize::from(is_fp(k)?);
        }
        row.dropped += rec.dropped.len();
        for &k in &rec.dropped {
            row.dropped_false_positives += usize::from(is_fp(k)?);
        }
    }
    finish_row(rows.last_mut(), eps_sum, iters);
    Ok(rows)
}

fn finish_row(row: Option<&mut DenoiseRow>, eps_sum: f64, iters: usize) {
    let Some(row) = row else { return };
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    row.mean_epsilon = eps_sum / iters.max(1) as f64;
    row.recall = ratio(row.dropped_false_positives, row.false_positives_seen);
    row.precision = ratio(row.dropped_false_positives, row.dropped);
    row.precision_defined = row.dropped > 0;
    row.baseline_recall = row.mean_epsilon;
    row.baseline_precision = ratio(row.false_positives_seen, row.positives_seen);
}
