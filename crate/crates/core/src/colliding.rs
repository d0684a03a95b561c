//! Colliding inference: sparse users borrow the scores of their nearest
//! neighbours in the warm-up representation space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{ndcg_at_k, rank_items, Scorer};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborWeights {
    /// 1/|N_u| for every neighbour.
    #[default]
    Uniform,
    /// Proportional to the (positive part of the) inner product.
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollidingConfig {
    pub lambda: f64,
    pub n_neighbors: usize,
    /// Fusion applies to users whose extra/implicit ratio is below this.
    pub ratio_threshold: f64,
    #[serde(default)]
    pub weights: NeighborWeights,
}

impl Default for CollidingConfig {
    fn default() -> Self {
        CollidingConfig {
            lambda: 0.5,
            n_neighbors: 10,
            ratio_threshold: 0.1,
            weights: NeighborWeights::Uniform,
        }
    }
}

impl CollidingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.n_neighbors == 0 {
            return Err(Error::InvalidArgument("n_neighbors must be at least 1".into()));
        }
        if !self.ratio_threshold.is_finite() {
            return Err(Error::InvalidArgument("ratio_threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Extra-feedback records over all implicit records of `u` in train.
pub fn user_ratio(dataset: &Dataset, u: u32) -> Result<f64> {
    let (mut extra, mut total) = (0usize, 0usize);
    for r in dataset.train.iter().filter(|r| r.user == u) {
        total += 1;
        extra += usize::from(r.extra);
    }
    if total == 0 {
        return Err(Error::Empty(format!("user {u} has no implicit interactions")));
    }
    Ok(extra as f64 / total as f64)
}

/// `user_ratio` for every user; `None` where the user has no train records.
pub fn user_ratios(dataset: &Dataset) -> Vec<Option<f64>> {
    let mut extra = vec![0usize; dataset.n_users];
    let mut total = vec![0usize; dataset.n_users];
    for r in &dataset.train {
        total[r.user as usize] += 1;
        extra[r.user as usize] += usize::from(r.extra);
    }
    extra
        .iter()
        .zip(&total)
        .map(|(&e, &t)| (t > 0).then(|| e as f64 / t as f64))
        .collect()
}

/// Per-user neighbour lists `(neighbor, weight)`, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    neighbors: Vec<Vec<(u32, f64)>>,
}

impl NeighborIndex {
    /// Exact top-`k` by inner product among `candidates`, self excluded,
    /// ties broken by lower user index. Users with no eligible candidate get
    /// an empty list.
    pub fn from_representations(
        reps: &[Vec<f64>],
        candidates: &[u32],
        k: usize,
        scheme: NeighborWeights,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("n_neighbors must be at least 1".into()));
        }
        if k >= reps.len() {
            return Err(Error::InvalidArgument(format!(
                "n_neighbors ({k}) must be below the number of users ({})",
                reps.len()
            )));
        }
        for &c in candidates {
            if c as usize >= reps.len() {
                return Err(Error::OutOfRange { what: "user", index: c as usize, bound: reps.len() });
            }
        }
        let neighbors = (0..reps.len())
            .into_par_iter()
            .map(|u| top_k(reps, candidates, u, k, scheme))
            .collect();
        Ok(NeighborIndex { neighbors })
    }

    pub fn neighbors(&self, u: u32) -> &[(u32, f64)] {
        &self.neighbors[u as usize]
    }

    pub fn n_users(&self) -> usize {
        self.neighbors.len()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn top_k(reps: &[Vec<f64>], candidates: &[u32], u: usize, k: usize, scheme: NeighborWeights) -> Vec<(u32, f64)> {
    let mut sims: Vec<(u32, f64)> = candidates
        .iter()
        .filter(|&&c| c as usize != u)
        .map(|&c| (c, dot(&reps[u], &reps[c as usize])))
        .collect();
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    sims.truncate(k);
    let weights: Vec<f64> = match scheme {
        NeighborWeights::Uniform => vec![1.0 / sims.len().max(1) as f64; sims.len()],
        NeighborWeights::Similarity => {
            let pos: Vec<f64> = sims.iter().map(|s| s.1.max(0.0)).collect();
            let total: f64 = pos.iter().sum();
            if total > 0.0 {
                pos.iter().map(|p| p / total).collect()
            } else {
                vec![1.0 / sims.len().max(1) as f64; sims.len()]
            }
        }
    };
    sims.iter().zip(weights).map(|(s, w)| (s.0, w)).collect()
}

/// Neighbour index over the warm snapshot. Candidates are the users with at
/// least one extra-feedback record.
pub fn build_neighbor_index(warm: &Model, dataset: &Dataset, config: &CollidingConfig) -> Result<NeighborIndex> {
    config.validate()?;
    let reps = (0..warm.n_users() as u32)
        .map(|u| warm.user_representation(u))
        .collect::<Result<Vec<_>>>()?;
    let mut has_extra = vec![false; dataset.n_users];
    for r in dataset.train.iter().filter(|r| r.extra) {
        has_extra[r.user as usize] = true;
    }
    let candidates: Vec<u32> = (0..dataset.n_users as u32).filter(|&u| has_extra[u as usize]).collect();
    NeighborIndex::from_representations(&reps, &candidates, config.n_neighbors, config.weights)
}

/// `lambda * own + (1 - lambda) * sum_j w_j * neighbor_j`.
pub fn colliding_fuse(own: &[f64], neighbors: &[Vec<f64>], weights: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if neighbors.len() != weights.len() {
        return Err(Error::Shape(format!("{} neighbour vectors but {} weights", neighbors.len(), weights.len())));
    }
    if let Some(bad) = neighbors.iter().find(|n| n.len() != own.len()) {
        return Err(Error::Shape(format!("neighbour scores of length {} against {}", bad.len(), own.len())));
    }
    if lambda == 1.0 || neighbors.is_empty() {
        return Ok(own.to_vec());
    }
    let mut mix = vec![0.0; own.len()];
    for (scores, &w) in neighbors.iter().zip(weights) {
        for (m, s) in mix.iter_mut().zip(scores) {
            *m += w * s;
        }
    }
    Ok(own.iter().zip(mix).map(|(o, m)| lambda * o + (1.0 - lambda) * m).collect())
}

/// Scores of `u` under colliding inference. Neighbours contribute their raw
/// final-snapshot scores.
pub fn infer_with_colliding(
    final_model: &Model,
    warm: Option<&Model>,
    dataset: &Dataset,
    config: &CollidingConfig,
    u: u32,
) -> Result<Vec<f64>> {
    let warm = warm.ok_or_else(|| Error::InvalidArgument("colliding inference needs the warm-up snapshot".into()))?;
    let index = build_neighbor_index(warm, dataset, config)?;
    fused_scores(final_model, &index, config, user_ratio(dataset, u)?, u)
}

fn fused_scores(model: &Model, index: &NeighborIndex, config: &CollidingConfig, ratio: f64, u: u32) -> Result<Vec<f64>> {
    let own = model.predict_all(u)?;
    if ratio >= config.ratio_threshold {
        return Ok(own);
    }
    let list = index.neighbors(u);
    let neighbors = list.iter().map(|&(j, _)| model.predict_all(j)).collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = list.iter().map(|&(_, w)| w).collect();
    colliding_fuse(&own, &neighbors, &weights, config.lambda)
}

/// Colliding inference over every user, with the index built once.
#[derive(Debug, Clone)]
pub struct CollidingScorer<'a> {
    model: &'a Model,
    index: NeighborIndex,
    ratios: Vec<Option<f64>>,
    config: CollidingConfig,
}

impl<'a> CollidingScorer<'a> {
    pub fn new(final_model: &'a Model, warm: &Model, dataset: &Dataset, config: &CollidingConfig) -> Result<Self> {
        Ok(CollidingScorer {
            model: final_model,
            index: build_neighbor_index(warm, dataset, config)?,
            ratios: user_ratios(dataset),
            config: *config,
        })
    }

    pub fn index(&self) -> &NeighborIndex {
        &self.index
    }

    /// Whether `u` is below the ratio threshold.
    pub fn is_fused(&self, u: u32) -> bool {
        self.ratios
            .get(u as usize)
            .copied()
            .flatten()
            .is_some_and(|r| r < self.config.ratio_threshold)
    }
}

impl Scorer for CollidingScorer<'_> {
    fn n_items(&self) -> usize {
        self.model.n_items()
    }

    fn score_all(&self, user: u32) -> Result<Vec<f64>> {
        match self.ratios.get(user as usize).copied().flatten() {
            Some(r) => fused_scores(self.model, &self.index, &self.config, r, user),
            None => self.model.predict_all(user),
        }
    }
}

/// Outcome of a grid search over `lambda` and the neighbour count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollidingChoice {
    pub config: CollidingConfig,
    /// Mean NDCG@k of the chosen setting on the tuning users.
    pub ndcg: f64,
}

/// Picks the `(lambda, n_neighbors)` pair with the best mean NDCG@`k` of
/// fused scores over `users`, measured against `relevant` (usually the
/// validation items). Fusion is applied to every user in `users` regardless
/// of the ratio threshold. Earlier grid entries win ties; users without
/// relevant items are ignored.
#[allow(clippy::too_many_arguments)]
pub fn select_colliding(
    final_model: &Model,
    warm: &Model,
    dataset: &Dataset,
    base: &CollidingConfig,
    lambdas: &[f64],
    neighbor_counts: &[usize],
    users: &[u32],
    relevant: &[Vec<u32>],
    k: usize,
) -> Result<CollidingChoice> {
    if lambdas.is_empty() || neighbor_counts.is_empty() {
        return Err(Error::InvalidArgument("empty tuning grid".into()));
    }
    let users: Vec<u32> = users
        .iter()
        .copied()
        .filter(|&u| relevant.get(u as usize).is_some_and(|r| !r.is_empty()))
        .collect();
    if users.is_empty() {
        return Err(Error::Empty("no tuning users with relevant items".into()));
    }
    let scores = (0..final_model.n_users() as u32)
        .into_par_iter()
        .map(|u| final_model.predict_all(u))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<CollidingChoice> = None;
    for &n in neighbor_counts {
        let config = CollidingConfig { n_neighbors: n, ..*base };
        let index = build_neighbor_index(warm, dataset, &config)?;
        let mixes: Vec<Vec<f64>> = users
            .par_iter()
            .map(|&u| {
                let mut mix = vec![0.0; dataset.n_items];
                for &(j, w) in index.neighbors(u) {
                    for (m, s) in mix.iter_mut().zip(&scores[j as usize]) {
                        *m += w * s;
                    }
                }
                mix
            })
            .collect();
        for &lambda in lambdas {
            let config = CollidingConfig { lambda, ..config };
            config.validate()?;
            let total = users
                .par_iter()
                .zip(&mixes)
                .map(|(&u, mix)| {
                    let own = &scores[u as usize];
                    let fused: Vec<f64> = if index.neighbors(u).is_empty() {
                        own.clone()
                    } else {
                        own.iter().zip(mix).map(|(o, m)| lambda * o + (1.0 - lambda) * m).collect()
                    };
                    let ranked = rank_items(&fused, dataset.user_pos(u), k.min(dataset.n_items - dataset.user_pos(u).len()))?;
                    Ok(ndcg_at_k(&ranked, &relevant[u as usize], k).unwrap_or(0.0))
                })
                .collect::<Result<Vec<f64>>>()?
                .iter()
                .sum::<f64>();
            let ndcg = total / users.len() as f64;
            if best.is_none_or(|b| ndcg > b.ndcg) {
                best = Some(CollidingChoice { config, ndcg });
            }
        }
    }
    Ok(best.expect("non-empty grid"))
}
