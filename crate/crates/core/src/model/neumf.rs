//! NeuMF: a GMF branch and a ReLU MLP tower over unshared embeddings, fused
//! by one output layer.

use super::params::{Block, Params};
use super::{sigmoid_clamped, ExampleGrad};
use crate::rng::Rng;

const GMF_USER: usize = 0;
const GMF_ITEM: usize = 1;
const MLP_USER: usize = 2;
const MLP_ITEM: usize = 3;
const FIRST_LAYER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct NeuMf {
    pub params: Params,
    pub factors: usize,
    /// Tower widths including the `2 * factors` input, e.g. `[64, 32, 16]`.
    pub tower: Vec<usize>,
}

impl NeuMf {
    pub fn init(n_users: usize, n_items: usize, factors: usize, tower: &[usize], rng: &mut Rng) -> Self {
        let mut blocks = vec![
            Block::gaussian("neumf.gmf_user", n_users, factors, 0.01, rng),
            Block::gaussian("neumf.gmf_item", n_items, factors, 0.01, rng),
            Block::gaussian("neumf.mlp_user", n_users, factors, 0.01, rng),
            Block::gaussian("neumf.mlp_item", n_items, factors, 0.01, rng),
        ];
        for (l, w) in tower.windows(2).enumerate() {
            blocks.push(Block::fan_in(format!("neumf.mlp{l}.w"), w[1], w[0], w[0], rng));
            blocks.push(Block::zeros(format!("neumf.mlp{l}.b"), 1, w[1]));
        }
        let fused = factors + tower.last().copied().unwrap_or(0);
        blocks.push(Block::fan_in("neumf.out.w", 1, fused, fused, rng));
        blocks.push(Block::zeros("neumf.out.b", 1, 1));
        NeuMf {
            params: Params { blocks },
            factors,
            tower: tower.to_vec(),
        }
    }

    fn n_layers(&self) -> usize {
        self.tower.len() - 1
    }

    fn out_w(&self) -> usize {
        FIRST_LAYER + 2 * self.n_layers()
    }

    pub fn n_users(&self) -> usize {
        self.params.blocks[GMF_USER].rows
    }

    pub fn n_items(&self) -> usize {
        self.params.blocks[GMF_ITEM].rows
    }

    /// Total activation slots per example: the tower input plus every layer
    /// output.
    pub(crate) fn act_len(&self) -> usize {
        self.tower.iter().sum()
    }

    /// Logit for `(u, i)`, writing the tower input and post-ReLU outputs
    /// into `acts` (length [`Self::act_len`]).
    pub(crate) fn forward(&self, u: usize, i: usize, acts: &mut [f64]) -> f64 {
        let b = &self.params.blocks;
        let d = self.factors;
        acts[..d].copy_from_slice(b[MLP_USER].row(u));
        acts[d..2 * d].copy_from_slice(b[MLP_ITEM].row(i));
        let mut offset = 0;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.tower[l], self.tower[l + 1]);
            let w = &b[FIRST_LAYER + 2 * l];
            let bias = &b[FIRST_LAYER + 2 * l + 1].data;
            let (prev, next) = acts[offset..].split_at_mut(n_in);
            for o in 0..n_out {
                let z: f64 = w.row(o).iter().zip(prev.iter()).map(|(a, x)| a * x).sum::<f64>() + bias[o];
                next[o] = z.max(0.0);
            }
            offset += n_in;
        }
        let top = &acts[offset..offset + self.tower[self.n_layers()]];

        let out = &b[self.out_w()].data;
        let (pg, qg) = (b[GMF_USER].row(u), b[GMF_ITEM].row(i));
        let gmf: f64 = (0..d).map(|k| out[k] * pg[k] * qg[k]).sum();
        let mlp: f64 = top.iter().zip(&out[d..]).map(|(a, w)| a * w).sum();
        gmf + mlp + b[self.out_w() + 1].data[0]
    }

    pub fn logit(&self, u: usize, i: usize) -> f64 {
        let mut acts = vec![0.0; self.act_len()];
        self.forward(u, i, &mut acts)
    }

    pub fn predict(&self, u: usize, i: usize) -> f64 {
        sigmoid_clamped(self.logit(u, i))
    }

    pub fn user_representation(&self, u: usize) -> Vec<f64> {
        self.params.blocks[GMF_USER].row(u).to_vec()
    }

    pub(crate) fn accumulate(&self, grads: &mut Params, ex: ExampleGrad, acts: &[f64]) {
        let b = &self.params.blocks;
        let d = self.factors;
        let g = ex.dlogit;
        let (u, i) = (ex.user, ex.item);
        let ow = self.out_w();
        let out = &b[ow].data;

        // GMF branch and fusion layer.
        let (pg, qg) = (b[GMF_USER].row(u), b[GMF_ITEM].row(i));
        for k in 0..d {
            grads.blocks[ow].data[k] += g * pg[k] * qg[k];
            grads.blocks[GMF_USER].row_mut(u)[k] += g * out[k] * qg[k];
            grads.blocks[GMF_ITEM].row_mut(i)[k] += g * out[k] * pg[k];
        }
        grads.blocks[ow + 1].data[0] += g;

        let n_layers = self.n_layers();
        let mut offsets = Vec::with_capacity(n_layers + 1);
        let mut acc = 0;
        for &w in &self.tower {
            offsets.push(acc);
            acc += w;
        }
        let top_off = offsets[n_layers];
        let top_w = self.tower[n_layers];
        for k in 0..top_w {
            grads.blocks[ow].data[d + k] += g * acts[top_off + k];
        }

        // delta at the top layer's pre-activation
        let mut delta: Vec<f64> = (0..top_w)
            .map(|k| if acts[top_off + k] > 0.0 { g * out[d + k] } else { 0.0 })
            .collect();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.tower[l], self.tower[l + 1]);
            let input = &acts[offsets[l]..offsets[l] + n_in];
            let wi = FIRST_LAYER + 2 * l;
            {
                let dw = &mut grads.blocks[wi];
                for o in 0..n_out {
                    if delta[o] == 0.0 {
                        continue;
                    }
                    let row = dw.row_mut(o);
                    for (r, x) in row.iter_mut().zip(input) {
                        *r += delta[o] * x;
                    }
                }
            }
            for o in 0..n_out {
                grads.blocks[wi + 1].data[o] += delta[o];
            }
            let w = &b[wi];
            let mut back = vec![0.0; n_in];
            for o in 0..n_out {
                if delta[o] == 0.0 {
                    continue;
                }
                for (bk, wv) in back.iter_mut().zip(w.row(o)) {
                    *bk += delta[o] * wv;
                }
            }
            if l > 0 {
                for (bk, x) in back.iter_mut().zip(input) {
                    if *x <= 0.0 {
                        *bk = 0.0;
                    }
                }
            }
            delta = back;
        }
        // delta now holds d/d(tower input) = [mlp_user; mlp_item]
        for k in 0..d {
            grads.blocks[MLP_USER].row_mut(u)[k] += delta[k];
            grads.blocks[MLP_ITEM].row_mut(i)[k] += delta[d + k];
        }
    }
}
