//! Collaborative denoising autoencoder. The input is a user's implicit
//! history; the hidden layer adds a per-user bias before the ReLU and each
//! item's output is an independent sigmoid unit.

use std::sync::Arc;

use rand::Rng as _;

use super::params::{Block, Params};
use super::sigmoid_clamped;
use crate::rng::Rng;

const ENC: usize = 0;
const USER: usize = 1;
const ENC_B: usize = 2;
/// Decoder, stored one row per item (`n_items x hidden`).
const DEC: usize = 3;
const DEC_B: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Cdae {
    pub params: Params,
    pub hidden: usize,
    pub corruption: f64,
    /// Sorted input items per user.
    pub history: Arc<Vec<Vec<u32>>>,
}

/// One user's encoder pass.
#[derive(Debug, Clone)]
pub(crate) struct Encoded {
    pub user: usize,
    /// Input multiplier per history item: 0 if dropped, `1/(1-q)` if kept.
    pub mask: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl Cdae {
    pub fn init(n_users: usize, n_items: usize, hidden: usize, corruption: f64, rng: &mut Rng) -> Self {
        let blocks = vec![
            Block::fan_in("cdae.enc.w", n_items, hidden, n_items, rng),
            // Zero so that users with identical histories start identical.
            Block::zeros("cdae.user", n_users, hidden),
            Block::zeros("cdae.enc.b", 1, hidden),
            Block::fan_in("cdae.dec.w", n_items, hidden, hidden, rng),
            Block::zeros("cdae.dec.b", 1, n_items),
        ];
        Cdae {
            params: Params { blocks },
            hidden,
            corruption,
            history: Arc::new(vec![Vec::new(); n_users]),
        }
    }

    pub fn n_users(&self) -> usize {
        self.params.blocks[USER].rows
    }

    pub fn n_items(&self) -> usize {
        self.params.blocks[DEC].rows
    }

    /// Encodes user `u`. With `rng` the input is corrupted (training mode).
    pub(crate) fn encode(&self, u: usize, rng: Option<&mut Rng>) -> Encoded {
        let b = &self.params.blocks;
        let items = &self.history[u];
        let mask: Vec<f64> = match rng {
            Some(rng) if self.corruption > 0.0 => {
                let keep = 1.0 / (1.0 - self.corruption);
                items
                    .iter()
                    .map(|_| if rng.random::<f64>() < self.corruption { 0.0 } else { keep })
                    .collect()
            }
            _ => vec![1.0; items.len()],
        };
        let mut pre: Vec<f64> = b[USER].row(u).to_vec();
        for (h, bias) in pre.iter_mut().zip(&b[ENC_B].data) {
            *h += bias;
        }
        for (&item, &m) in items.iter().zip(&mask) {
            if m == 0.0 {
                continue;
            }
            for (h, w) in pre.iter_mut().zip(b[ENC].row(item as usize)) {
                *h += m * w;
            }
        }
        let hidden = pre.into_iter().map(|z| z.max(0.0)).collect();
        Encoded { user: u, mask, hidden }
    }

    pub(crate) fn decode_logit(&self, hidden: &[f64], i: usize) -> f64 {
        let b = &self.params.blocks;
        hidden.iter().zip(b[DEC].row(i)).map(|(h, w)| h * w).sum::<f64>() + b[DEC_B].data[i]
    }

    pub fn predict(&self, u: usize, i: usize) -> f64 {
        let enc = self.encode(u, None);
        sigmoid_clamped(self.decode_logit(&enc.hidden, i))
    }

    pub fn predict_all(&self, u: usize) -> Vec<f64> {
        let enc = self.encode(u, None);
        (0..self.n_items())
            .map(|i| sigmoid_clamped(self.decode_logit(&enc.hidden, i)))
            .collect()
    }

    pub fn user_representation(&self, u: usize) -> Vec<f64> {
        self.encode(u, None).hidden
    }

    /// Decoder gradient for one `(u, i)` term; accumulates `d/d hidden` into
    /// `dhidden`.
    pub(crate) fn accumulate_output(&self, grads: &mut Params, enc: &Encoded, item: usize, dlogit: f64, dhidden: &mut [f64]) {
        let dec = self.params.blocks[DEC].row(item);
        for (dh, w) in dhidden.iter_mut().zip(dec) {
            *dh += dlogit * w;
        }
        let drow = grads.blocks[DEC].row_mut(item);
        for (d, h) in drow.iter_mut().zip(&enc.hidden) {
            *d += dlogit * h;
        }
        grads.blocks[DEC_B].data[item] += dlogit;
    }

    /// Encoder gradient for one user given the summed `d/d hidden`.
    pub(crate) fn accumulate_encoder(&self, grads: &mut Params, enc: &Encoded, dhidden: &[f64]) {
        let delta: Vec<f64> = dhidden
            .iter()
            .zip(&enc.hidden)
            .map(|(d, h)| if *h > 0.0 { *d } else { 0.0 })
            .collect();
        if delta.iter().all(|d| *d == 0.0) {
            return;
        }
        for (g, d) in grads.blocks[USER].row_mut(enc.user).iter_mut().zip(&delta) {
            *g += d;
        }
        for (g, d) in grads.blocks[ENC_B].data.iter_mut().zip(&delta) {
            *g += d;
        }
        for (&item, &m) in self.history[enc.user].iter().zip(&enc.mask) {
            if m == 0.0 {
                continue;
            }
            for (g, d) in grads.blocks[ENC].row_mut(item as usize).iter_mut().zip(&delta) {
                *g += m * d;
            }
        }
    }
}
