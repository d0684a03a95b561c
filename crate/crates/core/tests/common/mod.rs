#![allow(dead_code)]

use std::sync::Arc;

use adt_rec::data::{Batch, Interaction};
use adt_rec::model::{init_params, Model, ModelKind, ModelSpec};
use adt_rec::rng::{stream, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-4;

pub fn tiny_spec(kind: ModelKind) -> ModelSpec {
    ModelSpec {
        kind,
        factors: 3,
        tower: vec![6, 4, 3],
        hidden: 4,
        corruption: 0.3,
    }
}

/// A random model, batch and weight vector. Parameters are redrawn from
/// N(0, 0.5) so gradients are far from zero.
pub fn random_problem(kind: ModelKind, seed: u64) -> (Model, Batch, Vec<f64>) {
    let mut rng = stream(seed, 1000);
    let n_users = rng.random_range(2..6usize);
    let n_items = rng.random_range(3..8usize);
    let mut model = init_params(&tiny_spec(kind), n_users, n_items, seed).unwrap();
    let normal = Normal::new(0.0, 0.5).unwrap();
    for b in &mut model.params_mut().blocks {
        for x in &mut b.data {
            *x = normal.sample(&mut rng);
        }
    }
    let history: Vec<Vec<u32>> = (0..n_users)
        .map(|_| {
            let mut items: Vec<u32> = (0..n_items as u32).collect();
            items.shuffle(&mut rng);
            let mut h = items[..rng.random_range(1..=n_items)].to_vec();
            h.sort_unstable();
            h
        })
        .collect();
    model.set_history(Arc::new(history)).unwrap();

    let n_pos = rng.random_range(1..6);
    let n_neg = rng.random_range(0..6);
    let pair = |rng: &mut Rng| (rng.random_range(0..n_users as u32), rng.random_range(0..n_items as u32));
    let batch = Batch {
        positives: (0..n_pos).map(|_| {
            let (u, i) = pair(&mut rng);
            Interaction::new(u, i)
        }).collect(),
        negatives: (0..n_neg).map(|_| pair(&mut rng)).collect(),
    };
    let weights = (0..batch.len())
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..2.0) })
        .collect();
    (model, batch, weights)
}

/// Central-difference gradient of the weighted batch loss. Every evaluation
/// replays the same corruption draws.
pub fn numeric_gradient(model: &Model, batch: &Batch, weights: &[f64], rng: &Rng, step: f64) -> Vec<f64> {
    central_differences(model, batch, weights, rng, step)
}

fn central_differences(model: &Model, batch: &Batch, weights: &[f64], rng: &Rng, step: f64) -> Vec<f64> {
    let mut probe = model.clone();
    let mut grad = Vec::new();
    for b in 0..model.params().blocks.len() {
        for j in 0..model.params().blocks[b].data.len() {
            let x = model.params().blocks[b].data[j];
            probe.params_mut().blocks[b].data[j] = x + step;
            let up = probe.batch_loss(batch, weights, &mut rng.clone()).unwrap();
            probe.params_mut().blocks[b].data[j] = x - step;
            let down = probe.batch_loss(batch, weights, &mut rng.clone()).unwrap();
            probe.params_mut().blocks[b].data[j] = x;
            grad.push((up - down) / (2.0 * step));
        }
    }
    grad
}

/// True when a ReLU kink lies within one step of the draw, where central
/// differences are not a valid oracle. Detected by comparing steps `h` and
/// `h / 2`: on a smooth loss they agree to `O(h^2)`, across a kink they do not.
pub fn straddles_kink(model: &Model, batch: &Batch, weights: &[f64], seed: u64) -> bool {
    let rng = stream(seed, 2000);
    let full = central_differences(model, batch, weights, &rng, FD_STEP);
    let half = central_differences(model, batch, weights, &rng, FD_STEP / 2.0);
    full.iter().zip(&half).any(|(a, b)| (a - b).abs() > 1e-7)
}

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the full
/// parameter vector.
pub fn gradient_relative_error(model: &Model, batch: &Batch, weights: &[f64], seed: u64) -> f64 {
    let rng = stream(seed, 2000);
    let analytic: Vec<f64> = model
        .backprop_batch(batch, weights, &mut rng.clone())
        .unwrap()
        .values()
        .collect();
    let numeric = numeric_gradient(model, batch, weights, &rng, FD_STEP);
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn brute_recall(ranked: &[u32], relevant: &[u32], k: usize) -> f64 {
    let top: Vec<u32> = ranked.iter().copied().take(k).collect();
    let hits = relevant.iter().filter(|r| top.contains(r)).count();
    hits as f64 / relevant.len() as f64
}

fn dcg(ranked: &[u32], relevant: &[u32], k: usize) -> f64 {
    let mut total = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            total += 1.0 / (pos as f64 + 2.0).log2();
        }
    }
    total
}

pub fn permutations(items: &[u32]) -> Vec<Vec<u32>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (j, &first) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(j);
        for mut tail in permutations(&rest) {
            tail.insert(0, first);
            out.push(tail);
        }
    }
    out
}

/// The best DCG@k over every ordering of `universe`.
pub fn brute_ideal_dcg(relevant: &[u32], universe: &[u32], k: usize) -> f64 {
    permutations(universe)
        .iter()
        .map(|p| dcg(p, relevant, k))
        .fold(0.0, f64::max)
}

pub fn brute_ndcg(ranked: &[u32], relevant: &[u32], ideal: f64, k: usize) -> f64 {
    dcg(ranked, relevant, k) / ideal
}

pub fn subsets(items: &[u32], max_size: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for mask in 1u32..(1 << items.len()) {
        if mask.count_ones() as usize <= max_size {
            out.push(items.iter().enumerate().filter(|(j, _)| mask >> j & 1 == 1).map(|(_, &i)| i).collect());
        }
    }
    out
}

/// Compares the crate metrics against the brute-force oracle on every
/// ranking of up to `max_items` items, every relevant set of up to
/// `max_relevant` items and every cutoff `1..=max_items`. Returns the number
/// of cases checked and the worst absolute deviation.
pub fn exhaustive_metric_check(max_items: usize, max_relevant: usize) -> (usize, f64) {
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for n in 1..=max_items {
        let universe: Vec<u32> = (0..n as u32).collect();
        let rankings = permutations(&universe);
        for relevant in subsets(&universe, max_relevant) {
            let ideals: Vec<f64> = (1..=max_items).map(|k| brute_ideal_dcg(&relevant, &universe, k)).collect();
            for ranked in &rankings {
                for k in 1..=max_items {
                    let r = adt_rec::eval::recall_at_k(ranked, &relevant, k).unwrap();
                    let g = adt_rec::eval::ndcg_at_k(ranked, &relevant, k).unwrap();
                    worst = worst
                        .max((r - brute_recall(ranked, &relevant, k)).abs())
                        .max((g - brute_ndcg(ranked, &relevant, ideals[k - 1], k)).abs());
                    cases += 1;
                }
            }
        }
    }
    (cases, worst)
}

/// A small noisy synthetic dataset with extra feedback revealed.
pub fn small_data() -> adt_rec::experiment::DataConfig {
    adt_rec::experiment::DataConfig {
        n_users: 80,
        n_items: 60,
        latent_dim: 4,
        density: 0.12,
        ..adt_rec::experiment::DataConfig::default()
    }
}
