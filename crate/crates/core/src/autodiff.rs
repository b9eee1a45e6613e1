//! Reverse-mode differentiation over a flat tape of matrix operations.
//!
//! Every op evaluates eagerly when recorded, so values are available as the
//! graph is built. [`Tape::backward`] walks the tape once in reverse and
//! returns gradients for every recorded node.
//!
//! The op set is deliberately narrow: what the GCN encoder, the projection
//! head and the contrastive losses need. Vectors are `n x 1` matrices.

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{Matrix, SparseMatrix};
use crate::scalar::{log_sum_exp, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    SparseMatMul(Arc<SparseMatrix<T>>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    LeakyRelu(Var, T),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, Vec<T>),
    PairCosine {
        z: Var,
        pairs: Vec<(usize, usize)>,
        norms: Vec<T>,
    },
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    SegmentLogSumExp(Var, Vec<usize>),
    MinConst(Var, T),
    WeightedSum(Var, Vec<T>),
    Sum(Var),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    /// False when no parameter leaf feeds this node.
    needs_grad: bool,
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::SparseMatMul(_, x)
            | Op::LeakyRelu(x, _)
            | Op::Transpose(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Scale(x, _)
            | Op::Gather(x, _)
            | Op::SegmentLogSumExp(x, _)
            | Op::MinConst(x, _)
            | Op::WeightedSum(x, _)
            | Op::Sum(x) => vec![*x],
            Op::PairCosine { z, .. } => vec![*z],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn column<T: Scalar>(data: Vec<T>) -> Matrix<T> {
    let n = data.len();
    Matrix::from_vec(n, 1, data).expect("column length")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).as_slice()[0]
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `s * x` for a constant sparse `s`.
    pub fn sparse_matmul(&mut self, s: Arc<SparseMatrix<T>>, x: Var) -> Result<Var> {
        let v = s.mul_dense(self.value(x))?;
        Ok(self.push(v, Op::SparseMatMul(s, x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!("sub {:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.as_slice().iter().zip(y.as_slice()).map(|(&p, &q)| p - q).collect();
        let v = Matrix::from_vec(x.rows(), x.cols(), data)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Adds the `1 x C` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(v, Op::AddRow(a, bias)))
    }

    /// `x` where positive, `slope * x` otherwise. Slope 0 is ReLU.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { slope * e });
        self.push(v, Op::LeakyRelu(x, slope))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(T::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(T::ln);
        self.push(v, Op::Log(x))
    }

    /// Elementwise product with constants, one per element (row-major).
    pub fn scale(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.as_slice().len() {
            return Err(Error::Dimension(format!(
                "{} scale factors for {} elements",
                factors.len(),
                xv.as_slice().len()
            )));
        }
        let data = xv.as_slice().iter().zip(&factors).map(|(&a, &b)| a * b).collect();
        let v = Matrix::from_vec(xv.rows(), xv.cols(), data)?;
        Ok(self.push(v, Op::Scale(x, factors)))
    }

    /// Cosine similarity between rows `i` and `j` of `z` for each pair.
    /// Fails on a zero row, where cosine is undefined.
    pub fn pair_cosine(&mut self, z: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        let zv = self.value(z);
        let norms: Vec<T> = (0..zv.rows())
            .map(|r| zv.row(r).iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            if i >= zv.rows() || j >= zv.rows() {
                return Err(Error::Dimension(format!("pair ({i},{j}) for {} rows", zv.rows())));
            }
            if norms[i] == T::zero() || norms[j] == T::zero() {
                return Err(Error::Numeric(format!("cosine of zero vector (row {i} or {j})")));
            }
            let dot: T = zv.row(i).iter().zip(zv.row(j)).map(|(&a, &b)| a * b).sum();
            out.push(dot / (norms[i] * norms[j]));
        }
        Ok(self.push(column(out), Op::PairCosine { z, pairs, norms }))
    }

    /// Picks elements of `x` (row-major) into a column.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xs = self.value(x).as_slice();
        let data = idx
            .iter()
            .map(|&i| {
                xs.get(i)
                    .copied()
                    .ok_or_else(|| Error::Dimension(format!("gather index {i} of {}", xs.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.push(column(data), Op::Gather(x, idx)))
    }

    /// Flattens and stacks the inputs into one column.
    pub fn concat(&mut self, xs: Vec<Var>) -> Var {
        let mut data = Vec::new();
        for &x in &xs {
            data.extend_from_slice(self.value(x).as_slice());
        }
        self.push(column(data), Op::Concat(xs))
    }

    /// Log-sum-exp of each segment `offsets[s]..offsets[s+1]` of `x`.
    /// Segments must be nonempty.
    pub fn segment_log_sum_exp(&mut self, x: Var, offsets: Vec<usize>) -> Result<Var> {
        let xs = self.value(x).as_slice();
        if offsets.first() != Some(&0) || offsets.last() != Some(&xs.len()) {
            return Err(Error::Dimension("segment offsets must span the input".into()));
        }
        let mut out = Vec::with_capacity(offsets.len() - 1);
        for w in offsets.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Dimension("empty or unordered segment".into()));
            }
            out.push(log_sum_exp(&xs[w[0]..w[1]]));
        }
        Ok(self.push(column(out), Op::SegmentLogSumExp(x, offsets)))
    }

    /// `min(x, c)` elementwise. At equality the gradient flows as if unclamped.
    pub fn min_const(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| if e > c { c } else { e });
        self.push(v, Op::MinConst(x, c))
    }

    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let xs = self.value(x).as_slice();
        if weights.len() != xs.len() {
            return Err(Error::Dimension(format!("{} weights for {} elements", weights.len(), xs.len())));
        }
        let s: T = xs.iter().zip(&weights).map(|(&a, &w)| a * w).sum();
        Ok(self.push(Matrix::filled(1, 1, s), Op::WeightedSum(x, weights)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(x))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Dimension(format!("loss must be 1x1, got {:?}", lv.shape())));
        }
        if !lv.as_slice()[0].is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv.as_slice()[0])));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        if !node.needs_grad {
            return Ok(());
        }
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, d: Matrix<T>| {
            if !wants(&v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    acc(*a, g.matmul_t(self.value(*b))?);
                }
                if wants(b) {
                    acc(*b, self.value(*a).t_matmul(g)?);
                }
            }
            Op::SparseMatMul(s, x) => {
                if wants(x) {
                    acc(*x, s.t_mul_dense(g)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-T::one()));
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, &x) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(*bias, db);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let data = xv
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(&e, &d)| if e > T::zero() { d } else { *slope * d })
                    .collect();
                acc(*x, Matrix::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::Exp(x) => {
                let data = node.value.as_slice().iter().zip(g.as_slice()).map(|(&y, &d)| y * d).collect();
                acc(*x, Matrix::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::Log(x) => {
                let data = self.value(*x).as_slice().iter().zip(g.as_slice()).map(|(&e, &d)| d / e).collect();
                acc(*x, Matrix::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::Scale(x, f) => {
                let data = g.as_slice().iter().zip(f).map(|(&d, &c)| d * c).collect();
                acc(*x, Matrix::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::PairCosine { z, pairs, norms } => {
                let zv = self.value(*z);
                let mut dz = Matrix::zeros(zv.rows(), zv.cols());
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let d = g.as_slice()[p];
                    if d == T::zero() {
                        continue;
                    }
                    let c = node.value.as_slice()[p];
                    let (ni, nj) = (norms[i], norms[j]);
                    let inv = T::one() / (ni * nj);
                    let ci = c / (ni * ni);
                    let cj = c / (nj * nj);
                    // rows are copied so i == j is handled without aliasing
                    let (zi, zj) = (zv.row(i).to_vec(), zv.row(j).to_vec());
                    for (o, (&a, &b)) in dz.row_mut(i).iter_mut().zip(zi.iter().zip(&zj)) {
                        *o += d * (b * inv - ci * a);
                    }
                    for (o, (&a, &b)) in dz.row_mut(j).iter_mut().zip(zi.iter().zip(&zj)) {
                        *o += d * (a * inv - cj * b);
                    }
                }
                acc(*z, dz);
            }
            Op::Gather(x, idx) => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let buf = dx.as_mut_slice();
                for (&i, &d) in idx.iter().zip(g.as_slice()) {
                    buf[i] += d;
                }
                acc(*x, dx);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let (r, c) = self.value(x).shape();
                    let part = g.as_slice()[off..off + r * c].to_vec();
                    off += r * c;
                    acc(x, Matrix::from_vec(r, c, part)?);
                }
            }
            Op::SegmentLogSumExp(x, offsets) => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let buf = dx.as_mut_slice();
                for (s, w) in offsets.windows(2).enumerate() {
                    let (d, lse) = (g.as_slice()[s], node.value.as_slice()[s]);
                    for i in w[0]..w[1] {
                        buf[i] += d * (xv.as_slice()[i] - lse).exp();
                    }
                }
                acc(*x, dx);
            }
            Op::MinConst(x, c) => {
                let data = self
                    .value(*x)
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(&e, &d)| if e > *c { T::zero() } else { d })
                    .collect();
                acc(*x, Matrix::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::WeightedSum(x, w) => {
                let (r, c) = self.value(*x).shape();
                let d = g.as_slice()[0];
                acc(*x, Matrix::from_vec(r, c, w.iter().map(|&wi| wi * d).collect())?);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                acc(*x, Matrix::filled(r, c, g.as_slice()[0]));
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

/// Denominator floor of the relative error in [`finite_diff_check`]; keeps
/// coordinates whose true gradient is ~0 from dividing noise by noise.
pub const REL_ERR_FLOOR: f64 = 1e-7;

/// Compares tape gradients with central differences.
///
/// `build` records the loss on a fresh tape given leaves for `params`. Up to
/// `max_coords` coordinates (all of them if fewer) are drawn at random across
/// all parameters. Returns the largest `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_diff_check<T, F, R>(
    build: F,
    params: &[Matrix<T>],
    epsilon: f64,
    max_coords: usize,
    rng: &mut R,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |ps: &[Matrix<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&mut tape, &leaves)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {v} at perturbed point")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Matrix<T>> = leaves.iter().map(|&l| grads.wrt(l)).collect();

    let sizes: Vec<usize> = params.iter().map(|p| p.as_slice().len()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        let mut v = index::sample(rng, total, max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let eps = T::lit(epsilon);
    let mut worst = 0.0f64;
    let mut work: Vec<Matrix<T>> = params.to_vec();
    for flat in picks {
        let (mut which, mut off) = (0, flat);
        while off >= sizes[which] {
            off -= sizes[which];
            which += 1;
        }
        let orig = work[which].as_slice()[off];
        work[which].as_mut_slice()[off] = orig + eps;
        let up = eval(&work)?;
        work[which].as_mut_slice()[off] = orig - eps;
        let down = eval(&work)?;
        work[which].as_mut_slice()[off] = orig;
        let numeric = ((up - down) / (eps + eps)).to_f64_lossy();
        let a = analytic[which].as_slice()[off].to_f64_lossy();
        let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
