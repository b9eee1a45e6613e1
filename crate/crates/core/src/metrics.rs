//! Homophily and multi-hop label consistency.
//!
//! `LC(n)` is the mean, over nodes with a nonempty exact-`n`-hop set, of the
//! fraction of that set sharing the node's label. Homophily is `LC(1)` and
//! is computed by the same code path, so the two agree bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopStats {
    /// Mean exact-hop set size over all nodes, hops `1..=k`.
    pub per_hop_avg_count: Vec<f64>,
    /// `LC(n)` for hops `1..=k`; `NaN` if no node has a nonempty hop-`n` set.
    pub per_hop_lc: Vec<f64>,
    pub hm: f64,
}

impl HopStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("hop,avg_count,lc\n");
        for (i, (c, lc)) in self.per_hop_avg_count.iter().zip(&self.per_hop_lc).enumerate() {
            s.push_str(&format!("{},{c},{lc}\n", i + 1));
        }
        s
    }
}

/// Per-node tallies for hops `1..=k`: `(hop size, same-label count)`.
fn node_hop_tallies<T: Scalar>(
    g: &Graph<T>,
    labels: &[usize],
    v: usize,
    k: usize,
) -> Vec<(usize, usize)> {
    // bfs_distances only fails for an out-of-range source
    let dist = g.bfs_distances(v, k).expect("node in range");
    let mut tally = vec![(0usize, 0usize); k];
    for (u, &d) in dist.iter().enumerate() {
        if d >= 1 && d <= k {
            tally[d - 1].0 += 1;
            if labels[u] == labels[v] {
                tally[d - 1].1 += 1;
            }
        }
    }
    tally
}

/// Sums per-node ratios in node order so the result is independent of
/// thread scheduling.
fn lc_from_tallies(tallies: &[Vec<(usize, usize)>], hop: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in tallies {
        let (size, same) = t[hop - 1];
        if size > 0 {
            sum += same as f64 / size as f64;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

fn all_tallies<T: Scalar>(g: &Graph<T>, k: usize) -> Result<Vec<Vec<(usize, usize)>>> {
    let labels = g.labels().ok_or(Error::MissingLabels)?;
    Ok((0..g.num_nodes())
        .into_par_iter()
        .map(|v| node_hop_tallies(g, labels, v, k))
        .collect())
}

/// Label consistency of exact `n`-hop neighborhoods. Nodes whose `n`-hop
/// set is empty are left out of the average.
pub fn label_consistency<T: Scalar>(g: &Graph<T>, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("hop must be >= 1".into()));
    }
    let tallies = all_tallies(g, n)?;
    lc_from_tallies(&tallies, n).ok_or_else(|| {
        Error::InvalidArgument(format!("no node has a nonempty {n}-hop neighborhood"))
    })
}

/// Mean same-label fraction of direct neighbors over non-isolated nodes.
pub fn homophily_metric<T: Scalar>(g: &Graph<T>) -> Result<f64> {
    g.labels().ok_or(Error::MissingLabels)?;
    label_consistency(g, 1).map_err(|e| match e {
        Error::InvalidArgument(_) => Error::InvalidArgument("every node is isolated".into()),
        e => e,
    })
}

/// Average hop-set sizes (empty sets count as zero) and `LC` per hop.
pub fn hop_size_histogram<T: Scalar>(g: &Graph<T>, k: usize) -> Result<HopStats> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let tallies = all_tallies(g, k)?;
    let n = g.num_nodes().max(1) as f64;
    let per_hop_avg_count = (1..=k)
        .map(|h| tallies.iter().map(|t| t[h - 1].0 as f64).sum::<f64>() / n)
        .collect();
    let per_hop_lc: Vec<f64> = (1..=k)
        .map(|h| lc_from_tallies(&tallies, h).unwrap_or(f64::NAN))
        .collect();
    Ok(HopStats {
        per_hop_avg_count,
        hm: per_hop_lc[0],
        per_hop_lc,
    })
}

/// Average hop-set sizes only; does not need labels.
pub fn hop_counts<T: Scalar>(g: &Graph<T>, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let sums = (0..g.num_nodes())
        .into_par_iter()
        .map(|v| {
            let dist = g.bfs_distances(v, k).expect("node in range");
            let mut c = vec![0usize; k];
            for &d in &dist {
                if d >= 1 && d <= k {
                    c[d - 1] += 1;
                }
            }
            c
        })
        .collect::<Vec<_>>();
    let n = g.num_nodes().max(1) as f64;
    Ok((0..k)
        .map(|h| sums.iter().map(|c| c[h] as f64).sum::<f64>() / n)
        .collect())
}
