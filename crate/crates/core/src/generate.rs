//! Synthetic graphs: stochastic block models with class-conditional
//! Gaussian features, plus a few fixed topologies used by tests.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmConfig {
    pub block_sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Fraction of nodes whose class (label and feature mean) is reassigned
    /// to a different block after the edges are drawn. Those nodes become
    /// false positives for their neighbors.
    #[serde(default)]
    pub label_flip_fraction: f64,
    pub seed: u64,
}

impl SbmConfig {
    pub fn new(block_sizes: Vec<usize>, p_in: f64, p_out: f64, seed: u64) -> Self {
        Self {
            block_sizes,
            p_in,
            p_out,
            feature_dim: 16,
            feature_noise: 1.0,
            label_flip_fraction: 0.0,
            seed,
        }
    }

    pub fn generate<T: Scalar>(&self) -> Result<Graph<T>> {
        generate_sbm_with_flips(self)
    }
}

/// Undirected SBM: pairs in the same block connect with `p_in`, across
/// blocks with `p_out`; `p_out > p_in` gives a heterophilous graph. Labels
/// are block ids; features are a per-block standard-normal mean plus
/// `feature_noise` times standard-normal noise.
pub fn generate_sbm<T: Scalar>(
    block_sizes: &[usize],
    p_in: f64,
    p_out: f64,
    feature_dim: usize,
    feature_noise: f64,
    seed: u64,
) -> Result<Graph<T>> {
    generate_sbm_with_flips(&SbmConfig {
        block_sizes: block_sizes.to_vec(),
        p_in,
        p_out,
        feature_dim,
        feature_noise,
        label_flip_fraction: 0.0,
        seed,
    })
}

fn generate_sbm_with_flips<T: Scalar>(cfg: &SbmConfig) -> Result<Graph<T>> {
    let SbmConfig {
        ref block_sizes,
        p_in,
        p_out,
        feature_dim,
        feature_noise,
        label_flip_fraction,
        seed,
    } = *cfg;
    if block_sizes.is_empty() {
        return Err(Error::InvalidArgument("block_sizes is empty".into()));
    }
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) {
        return Err(Error::InvalidArgument(format!(
            "edge probabilities must lie in [0,1], got p_in={p_in} p_out={p_out}"
        )));
    }
    if !(0.0..=1.0).contains(&label_flip_fraction) || !(feature_noise >= 0.0) {
        return Err(Error::InvalidArgument(
            "label_flip_fraction must be in [0,1] and feature_noise >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: Vec<usize> = block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
        .collect();
    let n = blocks.len();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if blocks[u] == blocks[v] { p_in } else { p_out };
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }

    let num_blocks = block_sizes.len();
    let mut labels = blocks;
    if num_blocks > 1 && label_flip_fraction > 0.0 {
        let flips = (label_flip_fraction * n as f64).round() as usize;
        for v in index::sample(&mut rng, n, flips) {
            let shift = rng.random_range(1..num_blocks);
            labels[v] = (labels[v] + shift) % num_blocks;
        }
    }

    let means: Vec<f64> = (0..num_blocks * feature_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut feats = Matrix::zeros(n, feature_dim);
    for v in 0..n {
        let mu = &means[labels[v] * feature_dim..(labels[v] + 1) * feature_dim];
        for (x, &m) in feats.row_mut(v).iter_mut().zip(mu) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = T::lit(m + feature_noise * z);
        }
    }
    Graph::from_edges(edges, feats, Some(labels))
}

/// Erdős–Rényi G(n, p) with standard-normal features and `num_classes`
/// uniformly random labels (no labels when `num_classes == 0`).
pub fn generate_gnp<T: Scalar>(
    n: usize,
    p: f64,
    feature_dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Graph<T>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("edge probability {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let mut feats = Matrix::zeros(n, feature_dim);
    for x in feats.as_mut_slice() {
        *x = T::lit(StandardNormal.sample(&mut rng));
    }
    let labels = (num_classes > 0).then(|| (0..n).map(|_| rng.random_range(0..num_classes)).collect());
    Graph::from_edges(edges, feats, labels)
}

/// Complete `d`-ary tree with `depth` levels below the root (node 0),
/// numbered breadth-first. Features are the one-hot depth level.
pub fn complete_tree<T: Scalar>(d: usize, depth: usize) -> Result<Graph<T>> {
    if d == 0 {
        return Err(Error::InvalidArgument("branching factor must be >= 1".into()));
    }
    let mut level_of = vec![0usize];
    let mut edges = Vec::new();
    let mut frontier = vec![0usize];
    for level in 1..=depth {
        let mut next = Vec::with_capacity(frontier.len() * d);
        for &parent in &frontier {
            for _ in 0..d {
                let child = level_of.len();
                level_of.push(level);
                edges.push((parent, child));
                next.push(child);
            }
        }
        frontier = next;
    }
    let mut feats = Matrix::zeros(level_of.len(), depth + 1);
    for (v, &l) in level_of.iter().enumerate() {
        feats[(v, l)] = T::one();
    }
    Graph::from_edges(edges, feats, None)
}

/// Cycle on `n` nodes with constant features.
pub fn cycle<T: Scalar>(n: usize) -> Result<Graph<T>> {
    Graph::from_edges((0..n).map(|i| (i, (i + 1) % n)), Matrix::filled(n, 1, T::one()), None)
}
