//! Generalized matrix factorization: `y = sigmoid(h . (p_u * q_i))`.

use super::params::{Block, Params};
use super::{sigmoid_clamped, ExampleGrad};
use crate::rng::Rng;

pub(crate) const P: usize = 0;
pub(crate) const Q: usize = 1;
pub(crate) const H: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Gmf {
    pub params: Params,
    pub factors: usize,
}

impl Gmf {
    pub fn init(n_users: usize, n_items: usize, factors: usize, rng: &mut Rng) -> Self {
        let p = Block::gaussian("gmf.user", n_users, factors, 0.01, rng);
        let q = Block::gaussian("gmf.item", n_items, factors, 0.01, rng);
        let h = Block::fan_in("gmf.out", 1, factors, factors, rng);
        Gmf {
            params: Params {
                blocks: vec![p, q, h],
            },
            factors,
        }
    }

    pub fn n_users(&self) -> usize {
        self.params.blocks[P].rows
    }

    pub fn n_items(&self) -> usize {
        self.params.blocks[Q].rows
    }

    #[inline]
    pub fn logit(&self, u: usize, i: usize) -> f64 {
        let b = &self.params.blocks;
        let (p, q, h) = (b[P].row(u), b[Q].row(i), &b[H].data);
        p.iter()
            .zip(q)
            .zip(h)
            .map(|((a, c), w)| a * c * w)
            .sum()
    }

    pub fn predict(&self, u: usize, i: usize) -> f64 {
        sigmoid_clamped(self.logit(u, i))
    }

    pub fn user_representation(&self, u: usize) -> Vec<f64> {
        self.params.blocks[P].row(u).to_vec()
    }

    pub(crate) fn accumulate(&self, grads: &mut Params, ex: ExampleGrad) {
        let b = &self.params.blocks;
        let (p, q, h) = (b[P].row(ex.user), b[Q].row(ex.item), &b[H].data);
        let g = ex.dlogit;
        {
            let dp = grads.blocks[P].row_mut(ex.user);
            for k in 0..self.factors {
                dp[k] += g * h[k] * q[k];
            }
        }
        {
            let dq = grads.blocks[Q].row_mut(ex.item);
            for k in 0..self.factors {
                dq[k] += g * h[k] * p[k];
            }
        }
        let dh = &mut grads.blocks[H].data;
        for k in 0..self.factors {
            dh[k] += g * p[k] * q[k];
        }
    }
}
