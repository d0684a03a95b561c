//! Training loops: normal / denoising training, clean training, finetuning
//! and warm-up on extra feedback, with per-epoch loss curves split by the
//! ground-truth noise flag.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{sample_negatives, Dataset, Interaction};
use crate::denoise::{batch_weights, ce_loss, LossStrategy};
use crate::error::{Error, Result};
use crate::eval::{evaluate_users, Scorer};
use crate::model::{init_params, Adam, AdamConfig, Model, ModelSpec};
use crate::rng::{self, streams, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    /// Cutoff of the validation Recall@K that is monitored.
    pub k: usize,
    /// Epochs without improvement before stopping.
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub strategy: LossStrategy,
    pub adam: AdamConfig,
    /// Positives per mini-batch; negatives come on top.
    pub batch_size: usize,
    pub neg_ratio: usize,
    pub max_iters: u64,
    pub seed: u64,
    /// Record the loss-group curve every `log_every` epochs and after the
    /// last one.
    pub log_losses: bool,
    pub log_every: usize,
    pub probe_size: usize,
    /// Keep per-iteration truncation records (T-CE only).
    pub record_drops: bool,
    pub early_stopping: Option<EarlyStopping>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelSpec::default(),
            strategy: LossStrategy::Ce,
            adam: AdamConfig::default(),
            batch_size: 1024,
            neg_ratio: 1,
            max_iters: 1000,
            seed: 0,
            log_losses: false,
            log_every: 1,
            probe_size: 10_000,
            record_drops: false,
            early_stopping: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if self.neg_ratio == 0 {
            return Err(Error::InvalidArgument("negative ratio must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidArgument("log_every must be at least 1".into()));
        }
        self.model.validate()
    }

    /// Iterations in one pass over `n` positives.
    pub fn iters_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size) as u64
    }
}

/// Settings of a training phase on the extra feedback only.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseConfig {
    /// Defaults to one epoch over the extra feedback.
    pub iterations: Option<u64>,
    /// Defaults to the main training rate.
    pub lr: Option<f64>,
}

/// Mean raw CE loss per interaction group at one point of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurveRow {
    pub epoch: usize,
    pub iteration: u64,
    pub tp_mean: Option<f64>,
    pub fp_mean: Option<f64>,
    pub pos_mean: Option<f64>,
    pub neg_mean: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurveLog {
    pub rows: Vec<LossCurveRow>,
}

impl LossCurveLog {
    /// `epoch,tp_mean,fp_mean,pos_mean,neg_mean`; empty groups are blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,tp_mean,fp_mean,pos_mean,neg_mean\n");
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                cell(r.tp_mean),
                cell(r.fp_mean),
                cell(r.pos_mean),
                cell(r.neg_mean)
            );
        }
        out
    }
}

/// Truncation record of one iteration. Indices point into `dataset.train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub epoch: usize,
    pub epsilon: f64,
    pub positives: Vec<u32>,
    pub dropped: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub loss_log: LossCurveLog,
    pub drop_log: Vec<DropRecord>,
    pub iterations: u64,
    pub epochs: usize,
}

/// A fixed sample of interactions per group, drawn once so every epoch is
/// measured on the same pairs.
#[derive(Debug, Clone)]
pub struct LossProbe {
    true_positives: Vec<(u32, u32)>,
    false_positives: Vec<(u32, u32)>,
    positives: Vec<(u32, u32)>,
    negatives: Vec<(u32, u32)>,
}

impl LossProbe {
    pub fn new(dataset: &Dataset, max_per_group: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, streams::PROBE);
        let mut pick = |mut pairs: Vec<(u32, u32)>| {
            if pairs.len() > max_per_group {
                let (chosen, _) = pairs.partial_shuffle(&mut rng, max_per_group);
                let mut chosen = chosen.to_vec();
                chosen.sort_unstable();
                chosen
            } else {
                pairs
            }
        };
        let tp = pick(dataset.train.iter().filter(|r| r.true_positive == Some(true)).map(Interaction::pair).collect());
        let fp = pick(dataset.train.iter().filter(|r| r.is_false_positive()).map(Interaction::pair).collect());
        let pos = pick(dataset.train.iter().map(Interaction::pair).collect());

        let mut negatives = Vec::new();
        if !dataset.train.is_empty() {
            let target = max_per_group.min(dataset.train.len());
            let mut attempts = 0usize;
            while negatives.len() < target && attempts < 100 * target {
                attempts += 1;
                let u = dataset.train[rng.random_range(0..dataset.train.len())].user;
                if dataset.user_pos(u).len() >= dataset.n_items {
                    continue;
                }
                let i = rng.random_range(0..dataset.n_items as u32);
                if !dataset.is_train_positive(u, i) {
                    negatives.push((u, i));
                }
            }
        }
        LossProbe {
            true_positives: tp,
            false_positives: fp,
            positives: pos,
            negatives,
        }
    }

    /// Group means at the current parameters.
    pub fn record(&self, model: &Model, epoch: usize, iteration: u64) -> Result<LossCurveRow> {
        let mean = |pairs: &[(u32, u32)], label: f64| -> Result<Option<f64>> {
            if pairs.is_empty() {
                return Ok(None);
            }
            let mut total = 0.0;
            for &(u, i) in pairs {
                total += ce_loss(model.predict_pair(u, i)?, label);
            }
            Ok(Some(total / pairs.len() as f64))
        };
        Ok(LossCurveRow {
            epoch,
            iteration,
            tp_mean: mean(&self.true_positives, 1.0)?,
            fp_mean: mean(&self.false_positives, 1.0)?,
            pos_mean: mean(&self.positives, 1.0)?,
            neg_mean: mean(&self.negatives, 0.0)?,
        })
    }
}

/// One row of group losses on a fresh probe of up to 10,000 pairs per group.
pub fn record_loss_groups(model: &Model, dataset: &Dataset, seed: u64) -> Result<LossCurveRow> {
    LossProbe::new(dataset, 10_000, seed).record(model, 0, 0)
}

fn history_of(dataset: &Dataset) -> Arc<Vec<Vec<u32>>> {
    Arc::new(dataset.positive_sets().to_vec())
}

/// Normal or denoising training from a fresh initialization.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let model = init_params(&config.model, dataset.n_users, dataset.n_items, config.seed)?;
    train_from(model, dataset, config)
}

/// Runs `config.max_iters` iterations of the chosen loss starting at `model`.
pub fn train_from(mut model: Model, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Empty("train partition".into()));
    }
    model.set_history(history_of(dataset))?;
    let indices: Vec<u32> = (0..dataset.train.len() as u32).collect();
    let mut rng = rng::stream(config.seed, streams::TRAIN);
    let probe = if config.log_losses {
        Some(LossProbe::new(dataset, config.probe_size, config.seed))
    } else {
        None
    };
    let record_drops = config.record_drops && matches!(config.strategy, LossStrategy::TruncatedCe(_));
    let validation = config.early_stopping.map(|_| dataset.validation_items());

    let mut opt = Adam::new(config.adam, model.params());
    let mut state = LoopState::default();
    let mut best: Option<(f64, Model, usize)> = None;
    let mut stalled = 0usize;

    while state.iteration < config.max_iters {
        let drops = run_epoch(
            &mut model,
            &mut opt,
            dataset,
            &indices,
            &config.strategy,
            config,
            config.max_iters,
            &mut state,
            &mut rng,
            record_drops,
        )?;
        state.drop_log.extend(drops);
        if let Some(probe) = &probe {
            if state.epoch % config.log_every == 0 || state.iteration >= config.max_iters {
                state.loss_log.rows.push(probe.record(&model, state.epoch, state.iteration)?);
            }
        }
        if let (Some(es), Some(valid)) = (config.early_stopping, &validation) {
            let report = evaluate_users(&model as &dyn Scorer, dataset, valid, None, &[es.k])?;
            let score = report.recall(es.k);
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, model.clone(), state.epoch));
                stalled = 0;
            } else {
                stalled += 1;
                if stalled >= es.patience {
                    log::info!("early stop after epoch {} (best epoch {})", state.epoch, best.as_ref().unwrap().2);
                    break;
                }
            }
        }
    }
    if let Some((_, m, _)) = best {
        model = m;
    }
    Ok(TrainOutcome {
        model,
        loss_log: state.loss_log,
        drop_log: state.drop_log,
        iterations: state.iteration,
        epochs: state.epoch,
    })
}

#[derive(Default)]
struct LoopState {
    iteration: u64,
    epoch: usize,
    loss_log: LossCurveLog,
    drop_log: Vec<DropRecord>,
}

/// One shuffled pass over `indices` (into `dataset.train`), stopping early
/// once `max_iters` is reached.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Model,
    opt: &mut Adam,
    dataset: &Dataset,
    indices: &[u32],
    strategy: &LossStrategy,
    config: &TrainConfig,
    max_iters: u64,
    state: &mut LoopState,
    rng: &mut Rng,
    record_drops: bool,
) -> Result<Vec<DropRecord>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    state.epoch += 1;
    let mut drops = Vec::new();
    for chunk in order.chunks(config.batch_size) {
        if state.iteration >= max_iters {
            break;
        }
        let positives: Vec<Interaction> = chunk.iter().map(|&k| dataset.train[k as usize]).collect();
        let batch = sample_negatives(&positives, dataset.positive_sets(), dataset.n_items, config.neg_ratio, rng)?;
        let fwd = model.forward_batch(&batch, rng).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss(state.iteration as usize),
            other => other,
        })?;
        let labels = batch.labels();
        let weights = batch_weights(strategy, &fwd.preds, &labels, state.iteration);
        let grads = model.backward(&batch, &fwd, &weights.weights)?;
        opt.step(model.params_mut(), &grads)?;
        if record_drops {
            drops.push(DropRecord {
                epoch: state.epoch,
                epsilon: strategy.drop_rate(state.iteration),
                positives: chunk.to_vec(),
                dropped: weights.dropped.iter().map(|&k| chunk[k]).collect(),
            });
        }
        state.iteration += 1;
    }
    Ok(drops)
}

/// Normal training on the true-positive part of the train partition.
pub fn train_clean(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    if !dataset.has_noise_flags() {
        return Err(Error::InvalidArgument("clean training needs noise flags".into()));
    }
    let clean: Vec<Interaction> = dataset.train.iter().filter(|r| r.true_positive == Some(true)).copied().collect();
    if clean.is_empty() {
        return Err(Error::Empty("no true-positive training interactions".into()));
    }
    let filtered = dataset.with_train(clean)?;
    let config = TrainConfig {
        strategy: LossStrategy::Ce,
        ..config.clone()
    };
    train(&filtered, &config)
}

/// CE training on the extra feedback only. Negatives exclude every implicit
/// training positive of the user, not just the extra ones.
fn train_on_extra(mut model: Model, dataset: &Dataset, phase: &PhaseConfig, config: &TrainConfig, stream: u64) -> Result<Model> {
    let extra: Vec<u32> = dataset
        .train
        .iter()
        .enumerate()
        .filter(|(_, r)| r.extra)
        .map(|(k, _)| k as u32)
        .collect();
    if extra.is_empty() {
        return Err(Error::Empty("extra feedback".into()));
    }
    let iterations = phase.iterations.unwrap_or_else(|| config.iters_per_epoch(extra.len()));
    model.set_history(history_of(dataset))?;
    if iterations == 0 {
        return Ok(model);
    }
    let adam = AdamConfig {
        lr: phase.lr.unwrap_or(config.adam.lr),
        ..config.adam
    };
    let mut opt = Adam::new(adam, model.params());
    let mut rng = rng::stream(config.seed, stream);
    let mut state = LoopState::default();
    while state.iteration < iterations {
        run_epoch(&mut model, &mut opt, dataset, &extra, &LossStrategy::Ce, config, iterations, &mut state, &mut rng, false)?;
    }
    Ok(model)
}

/// Continues training `model` on the extra feedback.
pub fn finetune(model: Model, dataset: &Dataset, phase: &PhaseConfig, config: &TrainConfig) -> Result<Model> {
    train_on_extra(model, dataset, phase, config, streams::FINETUNE)
}

#[derive(Debug, Clone)]
pub struct WarmupOutcome {
    /// Model after the extra-feedback phase, before any implicit training.
    pub warm: Model,
    pub adt: TrainOutcome,
}

/// Trains on the extra feedback first, then runs `adt` from that
/// initialization. The warm snapshot is returned untouched.
pub fn warmup_then_train(dataset: &Dataset, warmup: &PhaseConfig, adt: &TrainConfig) -> Result<WarmupOutcome> {
    adt.validate()?;
    let init = init_params(&adt.model, dataset.n_users, dataset.n_items, adt.seed)?;
    let warm = train_on_extra(init, dataset, warmup, adt, streams::WARMUP)?;
    let outcome = train_from(warm.clone(), dataset, adt)?;
    Ok(WarmupOutcome { warm, adt: outcome })
}
