//! Recommender models with hand-written gradients.
//!
//! Every model scores a `(user, item)` pair with a sigmoid unit. Training goes
//! through [`Model::forward_batch`] then [`Model::backward`], so the loss
//! layer can inspect predictions and choose per-example weights in between.

mod adam;
mod cdae;
mod checkpoint;
mod gmf;
mod neumf;
mod params;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use cdae::Cdae;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use gmf::Gmf;
pub use neumf::NeuMf;
pub use params::{Block, Params};

use crate::data::Batch;
use crate::denoise::ce_loss;
use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};

/// Predictions are clamped to `[PRED_CLAMP, 1 - PRED_CLAMP]` so the
/// cross-entropy stays finite.
pub const PRED_CLAMP: f64 = 1e-8;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn sigmoid_clamped(z: f64) -> f64 {
    sigmoid(z).clamp(PRED_CLAMP, 1.0 - PRED_CLAMP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gmf,
    NeuMf,
    Cdae,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gmf" => Ok(ModelKind::Gmf),
            "neumf" => Ok(ModelKind::NeuMf),
            "cdae" => Ok(ModelKind::Cdae),
            other => Err(Error::InvalidArgument(format!("unknown model `{other}`"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Gmf => "gmf",
            ModelKind::NeuMf => "neumf",
            ModelKind::Cdae => "cdae",
        })
    }
}

/// Architecture hyperparameters. Fields irrelevant to `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub factors: usize,
    pub tower: Vec<usize>,
    pub hidden: usize,
    pub corruption: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Gmf,
            factors: 32,
            tower: vec![64, 32, 16],
            hidden: 200,
            corruption: 0.5,
        }
    }
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            ..ModelSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ModelKind::Gmf => {
                if self.factors == 0 {
                    return Err(Error::InvalidArgument("factors must be positive".into()));
                }
            }
            ModelKind::NeuMf => {
                if self.factors == 0 || self.tower.is_empty() || self.tower.contains(&0) {
                    return Err(Error::InvalidArgument(
                        "factors and tower widths must be positive".into(),
                    ));
                }
                if self.tower[0] != 2 * self.factors {
                    return Err(Error::InvalidArgument(format!(
                        "tower input {} must equal 2 * factors = {}",
                        self.tower[0],
                        2 * self.factors
                    )));
                }
            }
            ModelKind::Cdae => {
                if self.hidden == 0 {
                    return Err(Error::InvalidArgument("hidden size must be positive".into()));
                }
                if !(0.0..1.0).contains(&self.corruption) {
                    return Err(Error::InvalidArgument(format!(
                        "corruption must lie in [0, 1), got {}",
                        self.corruption
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Model parameters plus their prediction functions.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Gmf(Gmf),
    NeuMf(NeuMf),
    Cdae(Cdae),
}

/// Deterministic initialization: N(0, 0.01) embeddings, fan-in uniform
/// dense layers, zero biases.
pub fn init_params(spec: &ModelSpec, n_users: usize, n_items: usize, seed: u64) -> Result<Model> {
    spec.validate()?;
    if n_users == 0 || n_items == 0 {
        return Err(Error::InvalidArgument("zero users or items".into()));
    }
    let mut rng = rng::stream(seed, streams::INIT);
    Ok(match spec.kind {
        ModelKind::Gmf => Model::Gmf(Gmf::init(n_users, n_items, spec.factors, &mut rng)),
        ModelKind::NeuMf => Model::NeuMf(NeuMf::init(n_users, n_items, spec.factors, &spec.tower, &mut rng)),
        ModelKind::Cdae => Model::Cdae(Cdae::init(n_users, n_items, spec.hidden, spec.corruption, &mut rng)),
    })
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ExampleGrad {
    pub user: usize,
    pub item: usize,
    pub dlogit: f64,
}

/// Predictions of one training forward pass plus whatever the backward pass
/// needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Clamped probabilities, one per batch example.
    pub preds: Vec<f64>,
    logits: Vec<f64>,
    cache: Cache,
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    Acts { stride: usize, acts: Vec<f64> },
    Cdae { encoded: Vec<cdae::Encoded>, slot: Vec<usize> },
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Gmf(_) => ModelKind::Gmf,
            Model::NeuMf(_) => ModelKind::NeuMf,
            Model::Cdae(_) => ModelKind::Cdae,
        }
    }

    pub fn n_users(&self) -> usize {
        match self {
            Model::Gmf(m) => m.n_users(),
            Model::NeuMf(m) => m.n_users(),
            Model::Cdae(m) => m.n_users(),
        }
    }

    pub fn n_items(&self) -> usize {
        match self {
            Model::Gmf(m) => m.n_items(),
            Model::NeuMf(m) => m.n_items(),
            Model::Cdae(m) => m.n_items(),
        }
    }

    pub fn params(&self) -> &Params {
        match self {
            Model::Gmf(m) => &m.params,
            Model::NeuMf(m) => &m.params,
            Model::Cdae(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Params {
        match self {
            Model::Gmf(m) => &mut m.params,
            Model::NeuMf(m) => &mut m.params,
            Model::Cdae(m) => &mut m.params,
        }
    }

    /// The architecture this model was built from, as far as it is
    /// recoverable from the parameters.
    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Gmf(m) => ModelSpec {
                kind: ModelKind::Gmf,
                factors: m.factors,
                ..ModelSpec::default()
            },
            Model::NeuMf(m) => ModelSpec {
                kind: ModelKind::NeuMf,
                factors: m.factors,
                tower: m.tower.clone(),
                ..ModelSpec::default()
            },
            Model::Cdae(m) => ModelSpec {
                kind: ModelKind::Cdae,
                hidden: m.hidden,
                corruption: m.corruption,
                ..ModelSpec::default()
            },
        }
    }

    /// Sets the per-user input histories. Only CDAE reads them.
    pub fn set_history(&mut self, history: Arc<Vec<Vec<u32>>>) -> Result<()> {
        if let Model::Cdae(m) = self {
            if history.len() != m.n_users() {
                return Err(Error::Shape(format!(
                    "history covers {} users, model has {}",
                    history.len(),
                    m.n_users()
                )));
            }
            if let Some(bad) = history.iter().flatten().find(|&&i| i as usize >= m.n_items()) {
                return Err(Error::OutOfRange {
                    what: "item",
                    index: *bad as usize,
                    bound: m.n_items(),
                });
            }
            m.history = history;
        }
        Ok(())
    }

    fn check_user(&self, u: u32) -> Result<usize> {
        let u = u as usize;
        if u >= self.n_users() {
            return Err(Error::OutOfRange {
                what: "user",
                index: u,
                bound: self.n_users(),
            });
        }
        Ok(u)
    }

    fn check_item(&self, i: u32) -> Result<usize> {
        let i = i as usize;
        if i >= self.n_items() {
            return Err(Error::OutOfRange {
                what: "item",
                index: i,
                bound: self.n_items(),
            });
        }
        Ok(i)
    }

    /// Inference-mode probability for one pair.
    pub fn predict_pair(&self, u: u32, i: u32) -> Result<f64> {
        let (u, i) = (self.check_user(u)?, self.check_item(i)?);
        Ok(match self {
            Model::Gmf(m) => m.predict(u, i),
            Model::NeuMf(m) => m.predict(u, i),
            Model::Cdae(m) => m.predict(u, i),
        })
    }

    /// Inference-mode probabilities over every item.
    pub fn predict_all(&self, u: u32) -> Result<Vec<f64>> {
        let u = self.check_user(u)?;
        Ok(match self {
            Model::Gmf(m) => (0..m.n_items()).map(|i| m.predict(u, i)).collect(),
            Model::NeuMf(m) => {
                let mut acts = vec![0.0; m.act_len()];
                (0..m.n_items())
                    .map(|i| sigmoid_clamped(m.forward(u, i, &mut acts)))
                    .collect()
            }
            Model::Cdae(m) => m.predict_all(u),
        })
    }

    /// The vector neighbors are searched in: the (GMF-branch) user embedding,
    /// or the CDAE hidden code of the uncorrupted history.
    pub fn user_representation(&self, u: u32) -> Result<Vec<f64>> {
        let u = self.check_user(u)?;
        Ok(match self {
            Model::Gmf(m) => m.user_representation(u),
            Model::NeuMf(m) => m.user_representation(u),
            Model::Cdae(m) => m.user_representation(u),
        })
    }

    /// Training-mode forward pass. CDAE draws its input corruption from
    /// `rng`; the other models ignore it.
    pub fn forward_batch(&self, batch: &Batch, rng: &mut Rng) -> Result<ForwardPass> {
        let n = batch.len();
        let mut pairs = Vec::with_capacity(n);
        for (u, i, _) in batch.examples() {
            pairs.push((self.check_user(u)?, self.check_item(i)?));
        }
        let mut logits = Vec::with_capacity(n);
        let cache = match self {
            Model::Gmf(m) => {
                logits.extend(pairs.iter().map(|&(u, i)| m.logit(u, i)));
                Cache::None
            }
            Model::NeuMf(m) => {
                let stride = m.act_len();
                let mut acts = vec![0.0; stride * n];
                for (k, &(u, i)) in pairs.iter().enumerate() {
                    logits.push(m.forward(u, i, &mut acts[k * stride..(k + 1) * stride]));
                }
                Cache::Acts { stride, acts }
            }
            Model::Cdae(m) => {
                let mut index: HashMap<usize, usize> = HashMap::new();
                let mut encoded = Vec::new();
                let mut slot = Vec::with_capacity(n);
                for &(u, i) in &pairs {
                    let s = *index.entry(u).or_insert_with(|| {
                        encoded.push(m.encode(u, Some(rng)));
                        encoded.len() - 1
                    });
                    slot.push(s);
                    logits.push(m.decode_logit(&encoded[s].hidden, i));
                }
                Cache::Cdae { encoded, slot }
            }
        };
        if let Some(k) = logits.iter().position(|z| !z.is_finite()) {
            let (u, i, _) = batch.example(k);
            return Err(Error::NonFinite(format!("logit of ({u}, {i})")));
        }
        let preds = logits.iter().map(|&z| sigmoid_clamped(z)).collect();
        Ok(ForwardPass { preds, logits, cache })
    }

    /// Gradient of `sum_k w_k * CE(y_k, yhat_k)` for the batch the forward
    /// pass was computed on. Zero-weight examples contribute nothing.
    pub fn backward(&self, batch: &Batch, fwd: &ForwardPass, weights: &[f64]) -> Result<Params> {
        if weights.len() != batch.len() || fwd.logits.len() != batch.len() {
            return Err(Error::Shape(format!(
                "batch has {} examples, got {} weights and {} predictions",
                batch.len(),
                weights.len(),
                fwd.logits.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("example weight {w} is not a finite non-negative number")));
        }
        let mut grads = self.params().zeros_like();
        let dlogit = |k: usize| {
            let (_, _, y) = batch.example(k);
            weights[k] * (sigmoid(fwd.logits[k]) - y)
        };
        match (self, &fwd.cache) {
            (Model::Gmf(m), Cache::None) => {
                for k in 0..batch.len() {
                    if weights[k] == 0.0 {
                        continue;
                    }
                    let (u, i, _) = batch.example(k);
                    let ex = ExampleGrad { user: u as usize, item: i as usize, dlogit: dlogit(k) };
                    m.accumulate(&mut grads, ex);
                }
            }
            (Model::NeuMf(m), Cache::Acts { stride, acts }) => {
                for k in 0..batch.len() {
                    if weights[k] == 0.0 {
                        continue;
                    }
                    let (u, i, _) = batch.example(k);
                    let ex = ExampleGrad { user: u as usize, item: i as usize, dlogit: dlogit(k) };
                    m.accumulate(&mut grads, ex, &acts[k * stride..(k + 1) * stride]);
                }
            }
            (Model::Cdae(m), Cache::Cdae { encoded, slot }) => {
                let mut dhidden = vec![vec![0.0; m.hidden]; encoded.len()];
                for k in 0..batch.len() {
                    if weights[k] == 0.0 {
                        continue;
                    }
                    let (_, i, _) = batch.example(k);
                    let s = slot[k];
                    m.accumulate_output(&mut grads, &encoded[s], i as usize, dlogit(k), &mut dhidden[s]);
                }
                for (enc, dh) in encoded.iter().zip(&dhidden) {
                    m.accumulate_encoder(&mut grads, enc, dh);
                }
            }
            _ => return Err(Error::Shape("forward pass came from a different model".into())),
        }
        grads.check_finite()?;
        Ok(grads)
    }

    pub fn backprop_batch(&self, batch: &Batch, weights: &[f64], rng: &mut Rng) -> Result<Params> {
        let fwd = self.forward_batch(batch, rng)?;
        self.backward(batch, &fwd, weights)
    }

    /// `sum_k w_k * CE(y_k, yhat_k)` under the same corruption draws
    /// [`Model::backprop_batch`] would make with this `rng`.
    pub fn batch_loss(&self, batch: &Batch, weights: &[f64], rng: &mut Rng) -> Result<f64> {
        let fwd = self.forward_batch(batch, rng)?;
        Ok(batch
            .examples()
            .zip(&fwd.preds)
            .zip(weights)
            .map(|(((_, _, y), &p), &w)| w * ce_loss(p, y))
            .sum())
    }
}
