use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A named, row-major parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Block {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Block {
            name: name.into(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn gaussian(name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Block {
            name: name.into(),
            rows,
            cols,
            data: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in(name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Block {
            name: name.into(),
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Ordered parameter blocks of one model; gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub blocks: Vec<Block>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            blocks: self
                .blocks
                .iter()
                .map(|b| Block::zeros(b.name.clone(), b.rows, b.cols))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks.iter().flat_map(|b| b.data.iter().copied())
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }

    pub fn check_finite(&self) -> Result<()> {
        for b in &self.blocks {
            if b.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(b.name.clone()));
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Params) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.blocks {
            b.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }
}
