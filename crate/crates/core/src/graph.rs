//! Immutable undirected graph in CSR form, plus exact BFS hop partitions.
//!
//! Edges are always stored symmetrized, deduplicated and without self-loops.
//! The self-loop of the GCN propagation operator is added later, by
//! [`crate::encoder::normalize_adjacency`].

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub type NodeId = usize;

/// Distance marker for nodes not reached by a BFS.
pub const UNREACHED: usize = usize::MAX;

const GRAPH_MAGIC: &[u8; 5] = b"GSCL1";

#[derive(Clone, Debug, PartialEq)]
pub struct Graph<T = f32> {
    offsets: Vec<usize>,
    targets: Vec<NodeId>,
    features: Matrix<T>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl<T: Scalar> Graph<T> {
    /// Builds a graph from an arbitrary (possibly directed, duplicated,
    /// self-looped) edge list. The node count is the feature row count.
    pub fn from_edges(
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
        features: Matrix<T>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = features.rows();
        let mut adj: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for (u, v) in edges {
            for id in [u, v] {
                if id >= n {
                    return Err(Error::NodeOutOfRange { id, num_nodes: n });
                }
            }
            if u != v {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        Self::from_adjacency_lists(adj, features, labels)
    }

    fn from_adjacency_lists(
        mut adj: Vec<Vec<NodeId>>,
        features: Matrix<T>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = adj.len();
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::RowMismatch {
                    what: "label count",
                    features: n,
                    expected: l.len(),
                });
            }
        }
        let num_classes = labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m + 1);
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
            targets.extend_from_slice(row);
            offsets.push(targets.len());
        }
        Ok(Self {
            offsets,
            targets,
            features,
            labels,
            num_classes,
        })
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of stored (directed) adjacency entries, i.e. twice the edge count.
    #[inline]
    pub fn nnz(&self) -> usize {
        self.targets.len()
    }

    #[inline]
    pub fn neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    #[inline]
    pub fn degree(&self, v: NodeId) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn targets(&self) -> &[NodeId] {
        &self.targets
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .copied()
                .filter(move |&v| u < v)
                .map(move |v| (u, v))
        })
    }

    pub fn cast<U: Scalar>(&self) -> Graph<U> {
        Graph {
            offsets: self.offsets.clone(),
            targets: self.targets.clone(),
            features: self.features.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.num_nodes() {
            return Err(Error::RowMismatch {
                what: "label count",
                features: self.num_nodes(),
                expected: labels.len(),
            });
        }
        self.num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_features(mut self, features: Matrix<T>) -> Result<Self> {
        if features.rows() != self.num_nodes() {
            return Err(Error::RowMismatch {
                what: "node count",
                features: features.rows(),
                expected: self.num_nodes(),
            });
        }
        self.features = features;
        Ok(self)
    }

    /// Relabels nodes: old node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[NodeId]) -> Result<Self> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(Error::InvalidArgument("permutation length".into()));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidArgument("not a permutation".into()));
            }
        }
        let mut feats = Matrix::zeros(n, self.feature_dim());
        for v in 0..n {
            feats.row_mut(perm[v]).copy_from_slice(self.features.row(v));
        }
        let labels = self.labels.as_ref().map(|l| {
            let mut out = vec![0; n];
            for v in 0..n {
                out[perm[v]] = l[v];
            }
            out
        });
        Self::from_edges(
            self.edges().map(|(u, v)| (perm[u], perm[v])),
            feats,
            labels,
        )
    }

    /// Single-source BFS distances, `UNREACHED` where no path exists.
    /// Stops expanding past `max_depth`.
    pub fn bfs_distances(&self, source: NodeId, max_depth: usize) -> Result<Vec<usize>> {
        let n = self.num_nodes();
        if source >= n {
            return Err(Error::NodeOutOfRange {
                id: source,
                num_nodes: n,
            });
        }
        let mut dist = vec![UNREACHED; n];
        let mut queue = VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let d = dist[u];
            if d == max_depth {
                continue;
            }
            for &v in self.neighbors(u) {
                if dist[v] == UNREACHED {
                    dist[v] = d + 1;
                    queue.push_back(v);
                }
            }
        }
        Ok(dist)
    }
}

/// Disjoint hop sets around one anchor, plus a sample of the far field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HopPartition {
    pub anchor: NodeId,
    /// `hop_sets[n - 1]` holds the nodes at exact distance `n`, sorted.
    pub hop_sets: Vec<Vec<NodeId>>,
    /// Sorted sample of nodes farther than `k` hops (or unreachable).
    pub beyond_sample: Vec<NodeId>,
    /// Size of the full far field the sample was drawn from.
    pub beyond_total: usize,
}

impl HopPartition {
    pub fn k(&self) -> usize {
        self.hop_sets.len()
    }

    /// Hop `h` in `1..=k+1`, where `k+1` is the far-field sample.
    pub fn hop(&self, h: usize) -> &[NodeId] {
        if h == self.hop_sets.len() + 1 {
            &self.beyond_sample
        } else {
            &self.hop_sets[h - 1]
        }
    }

    /// Sizes of hops `1..=k+1`.
    pub fn sizes(&self) -> Vec<usize> {
        (1..=self.k() + 1).map(|h| self.hop(h).len()).collect()
    }
}

/// Partitions every node except `anchor` by exact BFS distance.
///
/// Nodes farther than `k` hops, including unreachable ones, form the far
/// field; `negative_cap` bounds how many of them are sampled (uniformly,
/// without replacement). `None` keeps the whole far field.
pub fn bfs_hop_partition<T: Scalar, R: Rng + ?Sized>(
    g: &Graph<T>,
    anchor: NodeId,
    k: usize,
    negative_cap: Option<usize>,
    rng: &mut R,
) -> Result<HopPartition> {
    if k == 0 {
        return Err(Error::InvalidArgument("hop range k must be >= 1".into()));
    }
    let dist = g.bfs_distances(anchor, k)?;
    let mut hop_sets = vec![Vec::new(); k];
    let mut far = Vec::new();
    for (v, &d) in dist.iter().enumerate() {
        match d {
            0 => {}
            d if d <= k => hop_sets[d - 1].push(v),
            _ => far.push(v),
        }
    }
    let beyond_total = far.len();
    let beyond_sample = match negative_cap {
        Some(cap) if cap < far.len() => {
            let mut s: Vec<NodeId> = index::sample(rng, far.len(), cap)
                .into_iter()
                .map(|i| far[i])
                .collect();
            s.sort_unstable();
            s
        }
        _ => far,
    };
    Ok(HopPartition {
        anchor,
        hop_sets,
        beyond_sample,
        beyond_total,
    })
}

/// Partitions for every anchor in `anchors`. Each anchor draws from its own
/// ChaCha stream, so results do not depend on evaluation order.
pub fn partition_anchors<T: Scalar>(
    g: &Graph<T>,
    anchors: &[NodeId],
    k: usize,
    negative_cap: Option<usize>,
    seed: u64,
) -> Result<Vec<HopPartition>> {
    anchors
        .par_iter()
        .map(|&a| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(a as u64);
            bfs_hop_partition(g, a, k, negative_cap, &mut rng)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Text ingestion
// ---------------------------------------------------------------------------

/// Parses a whitespace-separated `u v` edge list. `#` starts a comment.
pub fn parse_edge_list(text: &str) -> Result<Vec<(NodeId, NodeId)>> {
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut next = |what: &str| -> Result<NodeId> {
            let tok = it.next().ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("missing {what} node id"),
            })?;
            tok.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("invalid node id {tok:?}"),
            })
        };
        let u = next("source")?;
        let v = next("target")?;
        if it.next().is_some() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected exactly two node ids".into(),
            });
        }
        edges.push((u, v));
    }
    Ok(edges)
}

/// Parses a feature CSV with a header row; row `i` is node `i`.
pub fn parse_features<T: Scalar>(text: &str) -> Result<Matrix<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let width = rdr.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let line = i + 2;
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                msg: format!("{} columns, header has {width}", rec.len()),
            });
        }
        for field in rec.iter() {
            let x: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid number {field:?}"),
            })?;
            data.push(T::lit(x));
        }
        rows += 1;
    }
    Matrix::from_vec(rows, width, data)
}

/// Parses a `node_id,class_id` CSV with a header row. Every node in
/// `0..num_nodes` must appear exactly once.
pub fn parse_labels(text: &str, num_nodes: usize) -> Result<Vec<usize>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut labels = vec![None; num_nodes];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |j: usize| -> Result<usize> {
            let s = rec.get(j).ok_or_else(|| Error::Parse {
                line,
                msg: "expected node_id,class_id".into(),
            })?;
            s.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("invalid integer {s:?}"),
            })
        };
        let (node, class) = (field(0)?, field(1)?);
        if node >= num_nodes {
            return Err(Error::NodeOutOfRange {
                id: node,
                num_nodes,
            });
        }
        if labels[node].replace(class).is_some() {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate label for node {node}"),
            });
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(v, l)| {
            l.ok_or_else(|| Error::InvalidArgument(format!("node {v} has no label")))
        })
        .collect()
}

/// Builds a graph from edge-list text, feature CSV and optional label CSV.
pub fn load_graph<T: Scalar>(
    edge_list_text: &str,
    features_csv: &str,
    labels_csv: Option<&str>,
) -> Result<Graph<T>> {
    let features = parse_features::<T>(features_csv)?;
    let n = features.rows();
    let edges = parse_edge_list(edge_list_text)?;
    let labels = labels_csv.map(|t| parse_labels(t, n)).transpose()?;
    Graph::from_edges(edges, features, labels)
}

impl<T: Scalar> Graph<T> {
    pub fn edge_list_text(&self) -> String {
        let mut s = String::new();
        for (u, v) in self.edges() {
            s.push_str(&format!("{u} {v}\n"));
        }
        s
    }

    pub fn features_csv(&self) -> String {
        let d = self.feature_dim();
        let header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
        let mut s = header.join(",");
        s.push('\n');
        for r in 0..self.num_nodes() {
            let row: Vec<String> = self.features.row(r).iter().map(|x| x.to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn labels_csv(&self) -> Option<String> {
        self.labels.as_ref().map(|l| {
            let mut s = String::from("node_id,class_id\n");
            for (v, c) in l.iter().enumerate() {
                s.push_str(&format!("{v},{c}\n"));
            }
            s
        })
    }
}

// ---------------------------------------------------------------------------
// Binary cache
// ---------------------------------------------------------------------------
//
// "GSCL1" | u64 N | u64 nnz | u64 D | u64 has_labels
//         | (N+1) x u64 offsets | nnz x u64 targets | N*D x f32 features
//         | N x i64 labels (if has_labels)
// All integers little-endian.

fn write_u64(w: &mut impl Write, x: u64) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl<T: Scalar> Graph<T> {
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(GRAPH_MAGIC)?;
        write_u64(w, self.num_nodes() as u64)?;
        write_u64(w, self.nnz() as u64)?;
        write_u64(w, self.feature_dim() as u64)?;
        write_u64(w, self.labels.is_some() as u64)?;
        for &o in &self.offsets {
            write_u64(w, o as u64)?;
        }
        for &t in &self.targets {
            write_u64(w, t as u64)?;
        }
        for &x in self.features.as_slice() {
            let f = x.to_f32().unwrap_or(f32::NAN);
            w.write_all(&f.to_le_bytes())?;
        }
        if let Some(l) = &self.labels {
            for &c in l {
                w.write_all(&(c as i64).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != GRAPH_MAGIC {
            return Err(Error::Format("missing GSCL1 magic".into()));
        }
        let n = read_u64(r)? as usize;
        let nnz = read_u64(r)? as usize;
        let d = read_u64(r)? as usize;
        let has_labels = match read_u64(r)? {
            0 => false,
            1 => true,
            x => return Err(Error::Format(format!("bad label flag {x}"))),
        };
        let offsets = (0..=n)
            .map(|_| read_u64(r).map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        let targets = (0..nnz)
            .map(|_| read_u64(r).map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut feats = Vec::with_capacity(n * d);
        let mut b = [0u8; 4];
        for _ in 0..n * d {
            r.read_exact(&mut b)?;
            feats.push(T::lit(f32::from_le_bytes(b) as f64));
        }
        let labels = if has_labels {
            let mut b = [0u8; 8];
            let mut l = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut b)?;
                let c = i64::from_le_bytes(b);
                if c < 0 {
                    return Err(Error::Format(format!("negative label {c}")));
                }
                l.push(c as usize);
            }
            Some(l)
        } else {
            None
        };
        if offsets.first() != Some(&0)
            || offsets.last() != Some(&nnz)
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Format("invalid CSR offsets".into()));
        }
        // re-derive the CSR through the validating constructor
        let adj: Vec<Vec<NodeId>> = (0..n)
            .map(|u| targets[offsets[u]..offsets[u + 1]].to_vec())
            .collect();
        for (u, row) in adj.iter().enumerate() {
            for &v in row {
                if v >= n {
                    return Err(Error::NodeOutOfRange { id: v, num_nodes: n });
                }
                if v == u || targets[offsets[v]..offsets[v + 1]].binary_search(&u).is_err() {
                    return Err(Error::Format(format!("edge ({u},{v}) breaks symmetry or is a self-loop")));
                }
            }
        }
        let g = Self::from_adjacency_lists(adj, Matrix::from_vec(n, d, feats)?, labels)?;
        if g.targets != targets {
            return Err(Error::Format("CSR rows not sorted/deduplicated".into()));
        }
        Ok(g)
    }
}
