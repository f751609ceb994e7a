//! Base CTR predictor `f_theta` and attentive feature selector `g_phi`.
//!
//! Both networks are built on the autodiff graph so that training can
//! differentiate through them twice.

mod batch;
mod checkpoint;
mod net;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};

pub use batch::{Batch, RowMap};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use net::{
    batch_loss, cross_entropy, forward, pool, predict, predict_base, predict_batch, relevance_scores, Forward,
    Prediction, P_CLAMP,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{kind} id {id} is outside the vocabulary of {size}")]
    OutOfVocabulary { kind: &'static str, id: usize, size: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("instance {0} has an empty history")]
    EmptyHistory(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    WeightedSum,
    Softmax,
}

/// Which network computes the user representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Selector scores weight the history embeddings.
    Selector(Pooling),
    /// Plain sum of history embeddings; `phi` is unused.
    Base,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_items: usize,
    pub n_categories: usize,
    pub k: usize,
    pub hidden: [usize; 2],
}

impl ModelDims {
    pub fn new(n_items: usize, n_categories: usize, k: usize) -> Self {
        Self { n_items, n_categories, k, hidden: [80, 40] }
    }

    /// Rows of the embedding table: items first, then categories.
    pub fn rows(&self) -> usize {
        self.n_items + self.n_categories
    }

    pub fn theta_shapes(&self) -> Vec<Vec<usize>> {
        let [h1, h2] = self.hidden;
        vec![
            vec![self.rows(), self.k],
            vec![2 * self.k, h1],
            vec![1, h1],
            vec![h1, h2],
            vec![1, h2],
            vec![h2, 1],
            vec![1, 1],
        ]
    }

    pub fn phi_shapes(&self) -> Vec<Vec<usize>> {
        let [h1, h2] = self.hidden;
        vec![vec![4 * self.k, h1], vec![1, h1], vec![h1, h2], vec![1, h2], vec![h2, 1], vec![1, 1]]
    }
}

/// Index of the embedding table within `theta`.
pub const EMBEDDING: usize = 0;

/// Default half-width of the embedding initialization.
pub const EMBEDDING_INIT: f64 = 1.0;

/// Predictor parameters `theta` (embedding table, then three dense layers as
/// weight/bias pairs) and selector parameters `phi` (three dense layers).
/// Dense weights are stored `[fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub dims: ModelDims,
    pub theta: Vec<Tensor>,
    pub phi: Vec<Tensor>,
}

impl ParamSet {
    /// Dense weights uniform in `+-1/sqrt(fan_in)`, biases zero, embeddings
    /// uniform in `+-EMBEDDING_INIT`.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        Self::init_with(dims, seed, EMBEDDING_INIT)
    }

    /// As `init`, with embeddings uniform in `+-embedding_bound`.
    pub fn init_with(dims: ModelDims, seed: u64, embedding_bound: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |shape: &Vec<usize>, embedding: bool| -> Tensor {
            let n = shape.iter().product();
            if shape[0] == 1 && !embedding {
                return Tensor::zeros(shape);
            }
            let bound = if embedding { embedding_bound } else { 1.0 / (shape[0] as f64).sqrt() };
            Tensor::new(shape.clone(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
        };
        let theta = dims.theta_shapes().iter().enumerate().map(|(i, s)| make(s, i == EMBEDDING)).collect();
        let phi = dims.phi_shapes().iter().map(|s| make(s, false)).collect();
        Self { dims, theta, phi }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(&self.phi).all(Tensor::is_finite)
    }

    pub fn n_theta(&self) -> usize {
        self.theta.iter().map(Tensor::len).sum()
    }

    pub fn n_phi(&self) -> usize {
        self.phi.iter().map(Tensor::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_and_ranges() {
        let dims = ModelDims::new(30, 4, 8);
        let p = ParamSet::init(dims, 1);
        assert_eq!(p.theta[EMBEDDING].shape(), &[34, 8]);
        assert_eq!(p.phi[0].shape(), &[32, 80]);
        assert!(p.theta[EMBEDDING].data().iter().all(|v| v.abs() <= EMBEDDING_INIT));
        let bound = 1.0 / 32f64.sqrt();
        assert!(p.phi[0].data().iter().all(|v| v.abs() <= bound));
        assert!(p.phi[1].data().iter().all(|&v| v == 0.0));
        assert_eq!(p, ParamSet::init(dims, 1));
        assert_ne!(p, ParamSet::init(dims, 2));
    }
}
