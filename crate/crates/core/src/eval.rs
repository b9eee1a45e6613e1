//! Downstream evaluation on frozen embeddings: linear probe, k-means NMI,
//! same-label rate among nearest neighbors, and per-hop similarity.
//!
//! Everything here computes in `f64` regardless of the embedding scalar.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{HopPartition, NodeId};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<NodeId>,
    pub val: Vec<NodeId>,
    pub test: Vec<NodeId>,
}

impl Split {
    /// Random split with the given train and validation fractions; the
    /// rest is test.
    pub fn random(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Result<Self> {
        if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "split fractions {train_frac}/{val_frac} leave no test nodes"
            )));
        }
        let mut ids: Vec<NodeId> = (0..n).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((train_frac * n as f64).round() as usize).max(1);
        let n_val = (val_frac * n as f64).round() as usize;
        if n_train + n_val >= n {
            return Err(Error::InvalidArgument(format!("{n} nodes are too few to split")));
        }
        let mut s = Self {
            train: ids[..n_train].to_vec(),
            val: ids[n_train..n_train + n_val].to_vec(),
            test: ids[n_train + n_val..].to_vec(),
        };
        s.train.sort_unstable();
        s.val.sort_unstable();
        s.test.sort_unstable();
        Ok(s)
    }

    /// The default 10% / 10% / 80% split.
    pub fn standard(n: usize, seed: u64) -> Result<Self> {
        Self::random(n, 0.1, 0.1, seed)
    }

    /// Parses `node_id,split` rows (header required) where split is one of
    /// `train`, `val`, `test`. Unlisted nodes are unused.
    pub fn from_csv(text: &str, num_nodes: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut s = Self {
            train: vec![],
            val: vec![],
            test: vec![],
        };
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let parse_err = |msg: String| Error::Parse { line, msg };
            if rec.len() != 2 {
                return Err(parse_err(format!("expected 2 fields, got {}", rec.len())));
            }
            let id: NodeId = rec[0].parse().map_err(|_| parse_err(format!("bad node id {:?}", &rec[0])))?;
            if id >= num_nodes {
                return Err(Error::NodeOutOfRange { id, num_nodes });
            }
            match &rec[1] {
                "train" => s.train.push(id),
                "val" | "valid" => s.val.push(id),
                "test" => s.test.push(id),
                other => return Err(parse_err(format!("unknown split {other:?}"))),
            }
        }
        s.validate(num_nodes)?;
        Ok(s)
    }

    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        let mut seen = vec![false; num_nodes];
        for &v in self.train.iter().chain(&self.val).chain(&self.test) {
            if v >= num_nodes {
                return Err(Error::NodeOutOfRange { id: v, num_nodes });
            }
            if std::mem::replace(&mut seen[v], true) {
                return Err(Error::InvalidArgument(format!("node {v} is in more than one split")));
            }
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::InvalidArgument("train and test splits must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub weight_decays: [f64; 2],
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decays: [0.0, 1e-4],
            max_epochs: 1000,
            patience: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    pub weight_decay: f64,
    pub best_epoch: usize,
}

fn to_f64<T: Scalar>(h: &Matrix<T>) -> Matrix<f64> {
    h.cast()
}

fn accuracy(pred: &[usize], labels: &[usize], ids: &[NodeId]) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    ids.iter().filter(|&&v| pred[v] == labels[v]).count() as f64 / ids.len() as f64
}

struct Softmax {
    w: Matrix<f64>,
    b: Vec<f64>,
}

impl Softmax {
    fn predict(&self, x: &Matrix<f64>) -> Vec<usize> {
        let logits = x.matmul(&self.w).expect("probe dims");
        (0..x.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] + self.b[c] > row[best] + self.b[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

fn train_probe(
    x: &Matrix<f64>,
    labels: &[usize],
    split: &Split,
    num_classes: usize,
    wd: f64,
    cfg: &ProbeConfig,
    seed: u64,
) -> ProbeResult {
    let d = x.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).expect("valid sigma");
    let w = (0..d * num_classes).map(|_| normal.sample(&mut rng)).collect();
    let mut model = Softmax {
        w: Matrix::from_vec(d, num_classes, w).expect("sized"),
        b: vec![0.0; num_classes],
    };
    let xt = x.select_rows(&split.train);
    let yt: Vec<usize> = split.train.iter().map(|&v| labels[v]).collect();
    let n = xt.rows() as f64;

    let adam = crate::optim::AdamConfig::with_lr(cfg.lr, wd);
    let mut state = crate::optim::AdamState::<f64>::new([(d, num_classes), (1, num_classes)]);
    let mut bias = Matrix::from_vec(1, num_classes, model.b.clone()).expect("sized");

    let select_ids = if split.val.is_empty() { &split.train } else { &split.val };
    let mut best = ProbeResult {
        test_accuracy: 0.0,
        val_accuracy: -1.0,
        weight_decay: wd,
        best_epoch: 0,
    };
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let logits = xt.matmul(&model.w).expect("dims").add_row(&bias).expect("dims");
        let mut dlogits = Matrix::zeros(xt.rows(), num_classes);
        for r in 0..xt.rows() {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
            let g = dlogits.row_mut(r);
            for c in 0..num_classes {
                g[c] = ((row[c] - m).exp() / z - if c == yt[r] { 1.0 } else { 0.0 }) / n;
            }
        }
        let gw = xt.t_matmul(&dlogits).expect("dims");
        let gb_data = (0..num_classes).map(|c| (0..xt.rows()).map(|r| dlogits[(r, c)]).sum()).collect();
        let gb = Matrix::from_vec(1, num_classes, gb_data).expect("sized");
        state
            .step(&adam, &mut [&mut model.w, &mut bias], &[gw, gb])
            .expect("shapes fixed");
        model.b = bias.as_slice().to_vec();

        let pred = model.predict(x);
        let val = accuracy(&pred, labels, select_ids);
        if val > best.val_accuracy {
            best.val_accuracy = val;
            best.test_accuracy = accuracy(&pred, labels, &split.test);
            best.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    best
}

/// Softmax regression on frozen `h`, trained full batch with Adam and
/// early-stopped on validation accuracy. Weight decay is picked from
/// `cfg.weight_decays` by validation accuracy (first wins ties). Returns the
/// test accuracy at the best validation epoch.
pub fn linear_probe_with<T: Scalar>(
    h: &Matrix<T>,
    labels: &[usize],
    split: &Split,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if labels.len() != h.rows() {
        return Err(Error::RowMismatch {
            what: "labels",
            features: h.rows(),
            expected: labels.len(),
        });
    }
    split.validate(h.rows())?;
    let first = labels[split.train[0]];
    if split.train.iter().all(|&v| labels[v] == first) {
        return Err(Error::InvalidArgument("training split has a single class".into()));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let x = to_f64(h);
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite embeddings".into()));
    }
    let mut best: Option<ProbeResult> = None;
    for &wd in &cfg.weight_decays {
        let r = train_probe(&x, labels, split, num_classes, wd, cfg, seed);
        if best.is_none_or(|b| r.val_accuracy > b.val_accuracy) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one weight decay"))
}

pub fn linear_probe<T: Scalar>(h: &Matrix<T>, labels: &[usize], split: &Split, seed: u64) -> Result<f64> {
    Ok(linear_probe_with(h, labels, split, seed, &ProbeConfig::default())?.test_accuracy)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
/// Two single-cluster labelings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument("labelings must be nonempty and equally long".into()));
    }
    let n = a.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut keys: Vec<_> = joint.keys().copied().collect();
    keys.sort_unstable();
    let mi: f64 = keys
        .iter()
        .map(|&(x, y)| {
            let nxy = joint[&(x, y)] as f64;
            (nxy / n) * (n * nxy / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy k-means++: each new center is the best of `2 + ln k` candidates
/// drawn proportional to squared distance.
fn kmeans_pp(x: &Matrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = x.rows();
    let trials = 2 + (k as f64).ln() as usize;
    let mut centers = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut closest: Vec<f64> = (0..n).map(|r| sq_dist(x.row(r), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = closest.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                let mut t = rng.random_range(0.0..total);
                let mut pick = n - 1;
                for (i, &d) in closest.iter().enumerate() {
                    if t < d {
                        pick = i;
                        break;
                    }
                    t -= d;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let next: Vec<f64> = (0..n)
                .map(|r| closest[r].min(sq_dist(x.row(r), x.row(cand))))
                .collect();
            let pot: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| pot < b.0) {
                best = Some((pot, cand, next));
            }
        }
        let (_, cand, next) = best.expect("trials >= 1");
        centers.push(x.row(cand).to_vec());
        closest = next;
    }
    centers
}

fn lloyd(x: &Matrix<f64>, mut centers: Vec<Vec<f64>>, max_iters: usize) -> (Vec<usize>, f64) {
    let n = x.rows();
    let k = centers.len();
    let d = x.cols();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let next: Vec<usize> = (0..n)
            .into_par_iter()
            .map(|r| {
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for (c, ctr) in centers.iter().enumerate() {
                    let dd = sq_dist(x.row(r), ctr);
                    if dd < bd {
                        bd = dd;
                        best = c;
                    }
                }
                best
            })
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for r in 0..n {
            counts[assign[r]] += 1;
            for (s, &v) in sums[assign[r]].iter_mut().zip(x.row(r)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = (0..n).map(|r| sq_dist(x.row(r), &centers[assign[r]])).sum();
    (assign, inertia)
}

/// Best-inertia clustering over `restarts` seeded runs.
pub fn kmeans<T: Scalar>(h: &Matrix<T>, num_clusters: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    if num_clusters < 1 || h.rows() < num_clusters {
        return Err(Error::InvalidArgument(format!(
            "cannot form {num_clusters} clusters from {} points",
            h.rows()
        )));
    }
    let x = to_f64(h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let centers = kmeans_pp(&x, num_clusters, &mut rng);
        let (assign, inertia) = lloyd(&x, centers, 300);
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, assign));
        }
    }
    Ok(best.expect("restarts >= 1").1)
}

/// NMI between 10-restart k-means clusters and `labels`.
pub fn kmeans_nmi<T: Scalar>(h: &Matrix<T>, labels: &[usize], num_clusters: usize, seed: u64) -> Result<f64> {
    if num_clusters < 2 {
        return Err(Error::InvalidArgument("need at least 2 clusters".into()));
    }
    if labels.len() != h.rows() {
        return Err(Error::RowMismatch {
            what: "labels",
            features: h.rows(),
            expected: labels.len(),
        });
    }
    nmi(&kmeans(h, num_clusters, 10, seed)?, labels)
}

/// Rows scaled to unit length; zero rows stay zero.
fn unit_rows<T: Scalar>(h: &Matrix<T>) -> Matrix<f64> {
    let mut x = to_f64(h);
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean fraction of each node's `top_k` most cosine-similar other nodes
/// that share its label. Ties go to the smaller node id; zero rows have
/// similarity 0 to everything.
pub fn sim_at_k<T: Scalar>(h: &Matrix<T>, labels: &[usize], top_k: usize) -> Result<f64> {
    let n = h.rows();
    if labels.len() != n {
        return Err(Error::RowMismatch {
            what: "labels",
            features: n,
            expected: labels.len(),
        });
    }
    if top_k == 0 || n <= top_k {
        return Err(Error::InvalidArgument(format!("need more than top_k={top_k} nodes, have {n}")));
    }
    let x = unit_rows(h);
    let per_node: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sims: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dot(x.row(i), x.row(j)), j))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            sims[..top_k].iter().filter(|&&(_, j)| labels[j] == labels[i]).count() as f64 / top_k as f64
        })
        .collect();
    Ok(per_node.iter().sum::<f64>() / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerHopSimilarity {
    /// Mean cosine per hop `1..=k+1`; `NaN` for a hop with no members.
    pub means: Vec<f64>,
    /// Min, 25%, median, 75%, max per hop (linear interpolation).
    pub quantiles: Vec<[f64; 5]>,
    pub counts: Vec<usize>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Cosine between each anchor and its hop members, pooled per hop index.
pub fn per_hop_similarity<T: Scalar>(h: &Matrix<T>, partitions: &[HopPartition]) -> Result<PerHopSimilarity> {
    let k = partitions.first().map_or(0, HopPartition::k);
    if partitions.iter().any(|p| p.k() != k) {
        return Err(Error::InvalidArgument("partitions disagree on k".into()));
    }
    let x = unit_rows(h);
    let mut pools: Vec<Vec<f64>> = vec![Vec::new(); k + 1];
    for p in partitions {
        for hop in 1..=k + 1 {
            for &u in p.hop(hop) {
                if u >= x.rows() || p.anchor >= x.rows() {
                    return Err(Error::NodeOutOfRange {
                        id: u.max(p.anchor),
                        num_nodes: x.rows(),
                    });
                }
                pools[hop - 1].push(dot(x.row(p.anchor), x.row(u)));
            }
        }
    }
    let means = pools
        .iter()
        .map(|v| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 })
        .collect();
    let counts = pools.iter().map(Vec::len).collect();
    let quantiles = pools
        .iter_mut()
        .map(|v| {
            v.sort_by(f64::total_cmp);
            [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile(v, q))
        })
        .collect();
    Ok(PerHopSimilarity {
        means,
        quantiles,
        counts,
    })
}
