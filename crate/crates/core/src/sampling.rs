//! Hop-set down-sampling (uniform or PageRank-weighted) and the PageRank
//! power iteration behind the weighted variant.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, HopPartition, NodeId};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerStrategy {
    None,
    Uniform,
    Pagerank,
}

impl std::str::FromStr for SamplerStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "uniform" => Ok(Self::Uniform),
            "pagerank" => Ok(Self::Pagerank),
            other => Err(Error::InvalidArgument(format!("unknown sampler {other:?}"))),
        }
    }
}

/// How many members of a hop set survive sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSize {
    /// Fraction of the hop set, rounded up, at least one member.
    Ratio(f64),
    Absolute(usize),
}

impl SampleSize {
    pub fn resolve(self, set_len: usize) -> usize {
        match self {
            SampleSize::Ratio(r) => {
                if set_len == 0 {
                    0
                } else {
                    ((r * set_len as f64).ceil() as usize).clamp(1, set_len)
                }
            }
            SampleSize::Absolute(s) => s.min(set_len),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: SamplerStrategy,
    pub size: SampleSize,
    pub damping: f64,
    pub pr_tolerance: f64,
    pub pr_max_iters: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: SamplerStrategy::None,
            size: SampleSize::Ratio(0.2),
            damping: 0.85,
            pr_tolerance: 1e-8,
            pr_max_iters: 200,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        match self.size {
            SampleSize::Ratio(r) if !(r > 0.0 && r <= 1.0) => {
                return Err(Error::InvalidArgument(format!("sample ratio {r} not in (0,1]")))
            }
            SampleSize::Absolute(0) => {
                return Err(Error::InvalidArgument("per-hop sample size must be >= 1".into()))
            }
            _ => {}
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::InvalidArgument(format!("damping {} not in (0,1)", self.damping)));
        }
        if !(self.pr_tolerance > 0.0) {
            return Err(Error::InvalidArgument("pagerank tolerance must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PageRank {
    pub scores: Vec<f64>,
    pub iterations: usize,
    /// False when `max_iters` ran out first; scores are still usable.
    pub converged: bool,
}

/// Power iteration on the random-walk matrix with uniform teleport.
/// Mass sitting on isolated nodes is spread uniformly each step.
pub fn pagerank<T: Scalar>(
    g: &Graph<T>,
    damping: f64,
    tolerance: f64,
    max_iters: usize,
) -> Result<PageRank> {
    let n = g.num_nodes();
    if n == 0 {
        return Err(Error::InvalidArgument("pagerank on an empty graph".into()));
    }
    if !(0.0..1.0).contains(&damping) {
        return Err(Error::InvalidArgument(format!("damping {damping} not in [0,1)")));
    }
    let inv_n = 1.0 / n as f64;
    let mut x = vec![inv_n; n];
    let mut next = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let dangling: f64 = (0..n).filter(|&v| g.degree(v) == 0).map(|v| x[v]).sum();
        let base = (1.0 - damping) * inv_n + damping * dangling * inv_n;
        for (v, out) in next.iter_mut().enumerate() {
            let inflow: f64 = g
                .neighbors(v)
                .iter()
                .map(|&u| x[u] / g.degree(u) as f64)
                .sum();
            *out = base + damping * inflow;
        }
        let delta: f64 = x.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut x, &mut next);
        if delta < tolerance {
            converged = true;
            break;
        }
    }
    let total: f64 = x.iter().sum();
    for s in &mut x {
        *s /= total;
    }
    Ok(PageRank {
        scores: x,
        iterations,
        converged,
    })
}

/// Samples without replacement from hop `hop` (in `1..=k`) of a partition.
/// Uniform ignores `scores`; PageRank weights members by their score,
/// renormalized over the hop set. With `SamplerStrategy::None` the hop set
/// is returned whole.
pub fn sample_hop<R: Rng + ?Sized>(
    partition: &HopPartition,
    hop: usize,
    size: usize,
    strategy: SamplerStrategy,
    scores: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<NodeId>> {
    if hop == 0 || hop > partition.k() {
        return Err(Error::InvalidArgument(format!(
            "hop {hop} outside 1..={}",
            partition.k()
        )));
    }
    let set = partition.hop(hop);
    if size >= set.len() || strategy == SamplerStrategy::None {
        return Ok(set.to_vec());
    }
    let mut out: Vec<NodeId> = match strategy {
        SamplerStrategy::Uniform => index::sample(rng, set.len(), size)
            .into_iter()
            .map(|i| set[i])
            .collect(),
        SamplerStrategy::Pagerank => {
            let scores = scores.ok_or_else(|| {
                Error::InvalidArgument("pagerank sampling needs scores".into())
            })?;
            weighted_without_replacement(set, scores, size, rng)?
        }
        SamplerStrategy::None => unreachable!(),
    };
    out.sort_unstable();
    Ok(out)
}

fn weighted_without_replacement<R: Rng + ?Sized>(
    set: &[NodeId],
    scores: &[f64],
    size: usize,
    rng: &mut R,
) -> Result<Vec<NodeId>> {
    if let Some(&v) = set.iter().find(|&&v| v >= scores.len()) {
        return Err(Error::NodeOutOfRange {
            id: v,
            num_nodes: scores.len(),
        });
    }
    let picked = index::sample_weighted(rng, set.len(), |i| scores[set[i]], size)
        .map_err(|e| Error::InvalidArgument(format!("pagerank weights: {e}")))?;
    Ok(picked.into_iter().map(|i| set[i]).collect())
}

/// Replaces hops `1..=k` of `partition` by samples. The far-field bucket is
/// left as is; it was already capped when the partition was built.
pub fn sample_partition<R: Rng + ?Sized>(
    partition: &HopPartition,
    cfg: &SamplerConfig,
    scores: Option<&[f64]>,
    rng: &mut R,
) -> Result<HopPartition> {
    let hop_sets = (1..=partition.k())
        .map(|h| {
            let size = cfg.size.resolve(partition.hop(h).len());
            sample_hop(partition, h, size, cfg.strategy, scores, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HopPartition {
        anchor: partition.anchor,
        hop_sets,
        beyond_sample: partition.beyond_sample.clone(),
        beyond_total: partition.beyond_total,
    })
}
