//! GCN encoder `H = f(X, A)` and the two-layer projection head used by the
//! critic during training.
//!
//! Each GCN layer computes `act(Â X W)` with `Â = D^-1/2 (A + I) D^-1/2`;
//! the last layer skips the activation. Downstream evaluation reads `H`,
//! the losses read the projection `Z`.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::{Matrix, SparseMatrix};
use crate::scalar::Scalar;

const PARAMS_MAGIC: &[u8; 6] = b"GSCLP1";
const EMBED_MAGIC: &[u8; 6] = b"GSCLE1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Leaky unit with the PReLU initial slope 0.25, held fixed.
    Prelu,
    /// Randomized leaky unit evaluated at its mean slope (1/8 + 1/3) / 2.
    Rrelu,
    Identity,
}

impl Activation {
    pub fn negative_slope<T: Scalar>(self) -> T {
        match self {
            Activation::Relu => T::zero(),
            Activation::Prelu => T::lit(0.25),
            Activation::Rrelu => T::lit((1.0 / 8.0 + 1.0 / 3.0) / 2.0),
            Activation::Identity => T::one(),
        }
    }

    pub fn apply<T: Scalar>(self, m: &Matrix<T>) -> Matrix<T> {
        let slope = self.negative_slope::<T>();
        m.map(|x| if x > T::zero() { x } else { slope * x })
    }

    fn code(self) -> u64 {
        match self {
            Activation::Relu => 0,
            Activation::Prelu => 1,
            Activation::Rrelu => 2,
            Activation::Identity => 3,
        }
    }

    fn from_code(c: u64) -> Result<Self> {
        Ok(match c {
            0 => Activation::Relu,
            1 => Activation::Prelu,
            2 => Activation::Rrelu,
            3 => Activation::Identity,
            _ => return Err(Error::Format(format!("unknown activation code {c}"))),
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "prelu" => Ok(Self::Prelu),
            "rrelu" => Ok(Self::Rrelu),
            "identity" | "linear" => Ok(Self::Identity),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

/// `D^-1/2 (A + I) D^-1/2`, where `D` counts the self-loop.
pub fn normalize_adjacency<T: Scalar>(g: &Graph<T>) -> SparseMatrix<T> {
    let n = g.num_nodes();
    let deg_hat = |v: usize| (g.degree(v) + 1) as f64;
    let mut offsets = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(g.nnz() + n);
    let mut values = Vec::with_capacity(g.nnz() + n);
    offsets.push(0);
    for u in 0..n {
        let nbrs = g.neighbors(u);
        let split = nbrs.partition_point(|&v| v < u);
        let row = nbrs[..split]
            .iter()
            .copied()
            .chain(std::iter::once(u))
            .chain(nbrs[split..].iter().copied());
        for v in row {
            cols.push(v);
            values.push(T::lit(1.0 / (deg_hat(u) * deg_hat(v)).sqrt()));
        }
        offsets.push(cols.len());
    }
    SparseMatrix::from_csr(n, offsets, cols, values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    /// GCN weights, `layer_weights[l]` is `D_l x D_{l+1}`.
    pub layer_weights: Vec<Matrix<T>>,
    pub proj_w1: Matrix<T>,
    pub proj_b1: Matrix<T>,
    pub proj_w2: Matrix<T>,
    pub proj_b2: Matrix<T>,
    pub activation: Activation,
}

fn glorot<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn bias<T: Scalar>(fan_in: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..cols)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Matrix::from_vec(1, cols, data).expect("sized")
}

/// Weights are uniform in `±sqrt(6 / (fan_in + fan_out))`; projection
/// biases are uniform in `±1/sqrt(fan_in)`.
///
/// `layer_dims` is `[D_in, D_1, ..., D_L]`; `proj_dims` is `(hidden, out)`.
pub fn init_params<T: Scalar>(
    layer_dims: &[usize],
    proj_dims: (usize, usize),
    activation: Activation,
    seed: u64,
) -> Result<EncoderParams<T>> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(Error::InvalidArgument(
            "need at least one GCN layer and positive dims".into(),
        ));
    }
    if proj_dims.0 == 0 || proj_dims.1 == 0 {
        return Err(Error::InvalidArgument("projection dims must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer_weights = layer_dims
        .windows(2)
        .map(|w| glorot(w[0], w[1], &mut rng))
        .collect();
    let out = *layer_dims.last().expect("len >= 2");
    let (hidden, proj_out) = proj_dims;
    let proj_w1 = glorot(out, hidden, &mut rng);
    let proj_b1 = bias(out, hidden, &mut rng);
    let proj_w2 = glorot(hidden, proj_out, &mut rng);
    let proj_b2 = bias(hidden, proj_out, &mut rng);
    Ok(EncoderParams {
        layer_weights,
        proj_w1,
        proj_b1,
        proj_w2,
        proj_b2,
        activation,
    })
}

impl<T: Scalar> EncoderParams<T> {
    pub fn input_dim(&self) -> usize {
        self.layer_weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layer_weights.last().map_or(0, Matrix::cols)
    }

    /// Flat parameter list in a fixed order: GCN layers, then W1, b1, W2, b2.
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut v: Vec<&Matrix<T>> = self.layer_weights.iter().collect();
        v.extend([&self.proj_w1, &self.proj_b1, &self.proj_w2, &self.proj_b2]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v: Vec<&mut Matrix<T>> = self.layer_weights.iter_mut().collect();
        v.extend([
            &mut self.proj_w1,
            &mut self.proj_b1,
            &mut self.proj_w2,
            &mut self.proj_b2,
        ]);
        v
    }

    /// Rebuilds params with the same layout from a flat tensor list.
    pub fn with_tensors(&self, tensors: Vec<Matrix<T>>) -> Result<Self> {
        let l = self.layer_weights.len();
        if tensors.len() != l + 4 {
            return Err(Error::Dimension(format!("{} tensors, expected {}", tensors.len(), l + 4)));
        }
        for (a, b) in tensors.iter().zip(self.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Dimension(format!("tensor {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let layer_weights = it.by_ref().take(l).collect();
        let mut next = || it.next().expect("counted");
        Ok(Self {
            layer_weights,
            proj_w1: next(),
            proj_b1: next(),
            proj_w2: next(),
            proj_b2: next(),
            activation: self.activation,
        })
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            layer_weights: self.layer_weights.iter().map(Matrix::cast).collect(),
            proj_w1: self.proj_w1.cast(),
            proj_b1: self.proj_b1.cast(),
            proj_w2: self.proj_w2.cast(),
            proj_b2: self.proj_b2.cast(),
            activation: self.activation,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn check_chain(&self) -> Result<()> {
        for w in self.layer_weights.windows(2) {
            if w[0].cols() != w[1].rows() {
                return Err(Error::Dimension("GCN layer dims do not chain".into()));
            }
        }
        let out = self.output_dim();
        let ok = self.proj_w1.rows() == out
            && self.proj_b1.shape() == (1, self.proj_w1.cols())
            && self.proj_w2.rows() == self.proj_w1.cols()
            && self.proj_b2.shape() == (1, self.proj_w2.cols());
        if !ok {
            return Err(Error::Dimension("projection dims do not chain".into()));
        }
        Ok(())
    }
}

/// Runs the GCN stack. `adj` is the output of [`normalize_adjacency`].
pub fn encode_with<T: Scalar>(
    adj: &SparseMatrix<T>,
    features: &Matrix<T>,
    params: &EncoderParams<T>,
) -> Result<Matrix<T>> {
    params.check_chain()?;
    if features.cols() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "features have {} columns, first layer expects {}",
            features.cols(),
            params.input_dim()
        )));
    }
    let last = params.layer_weights.len() - 1;
    let mut h = features.clone();
    for (l, w) in params.layer_weights.iter().enumerate() {
        let xw = h.matmul(w)?;
        h = adj.mul_dense(&xw)?;
        if l != last {
            h = params.activation.apply(&h);
        }
    }
    Ok(h)
}

pub fn encode<T: Scalar>(g: &Graph<T>, params: &EncoderParams<T>) -> Result<Matrix<T>> {
    encode_with(&normalize_adjacency(g), g.features(), params)
}

/// `Z = act(H W1 + b1) W2 + b2`, row-wise.
pub fn project<T: Scalar>(h: &Matrix<T>, params: &EncoderParams<T>) -> Result<Matrix<T>> {
    params.check_chain()?;
    if h.cols() != params.proj_w1.rows() {
        return Err(Error::Dimension(format!(
            "embeddings have {} columns, projection expects {}",
            h.cols(),
            params.proj_w1.rows()
        )));
    }
    let hidden = params.activation.apply(&h.matmul(&params.proj_w1)?.add_row(&params.proj_b1)?);
    hidden.matmul(&params.proj_w2)?.add_row(&params.proj_b2)
}

/// Tape handles for one set of parameters.
pub struct ParamVars {
    pub layers: Vec<Var>,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ParamVars {
    /// Same order as [`EncoderParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.layers.clone();
        v.extend([self.w1, self.b1, self.w2, self.b2]);
        v
    }

    pub fn from_slice(vars: &[Var], num_layers: usize) -> Result<Self> {
        if vars.len() != num_layers + 4 {
            return Err(Error::Dimension("parameter var count".into()));
        }
        Ok(Self {
            layers: vars[..num_layers].to_vec(),
            w1: vars[num_layers],
            b1: vars[num_layers + 1],
            w2: vars[num_layers + 2],
            b2: vars[num_layers + 3],
        })
    }
}

pub fn record_params<T: Scalar>(tape: &mut Tape<T>, params: &EncoderParams<T>) -> ParamVars {
    let vars: Vec<Var> = params.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
    ParamVars::from_slice(&vars, params.layer_weights.len()).expect("sized")
}

/// Differentiable encoder + projection. Returns `(H, Z)`.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    adj: &Arc<SparseMatrix<T>>,
    features: Var,
    vars: &ParamVars,
    activation: Activation,
) -> Result<(Var, Var)> {
    let slope = activation.negative_slope::<T>();
    let last = vars.layers.len() - 1;
    let mut h = features;
    for (l, &w) in vars.layers.iter().enumerate() {
        let xw = tape.matmul(h, w)?;
        h = tape.sparse_matmul(adj.clone(), xw)?;
        if l != last {
            h = tape.leaky_relu(h, slope);
        }
    }
    let a = tape.matmul(h, vars.w1)?;
    let a = tape.add_row(a, vars.b1)?;
    let a = tape.leaky_relu(a, slope);
    let z = tape.matmul(a, vars.w2)?;
    let z = tape.add_row(z, vars.b2)?;
    Ok((h, z))
}

// ---------------------------------------------------------------------------
// Binary formats
// ---------------------------------------------------------------------------
//
// Params:     "GSCLP1" | u64 activation | u64 L | L x (u64 rows, u64 cols)
//             | u64 proj_in | u64 proj_hidden | u64 proj_out
//             | f32 payload: layers, W1, b1, W2, b2 (row-major)
// Embeddings: "GSCLE1" | u64 rows | u64 cols | f32 payload (row-major)

fn put_u64(w: &mut impl Write, x: usize) -> Result<()> {
    w.write_all(&(x as u64).to_le_bytes())?;
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b) as usize)
}

fn put_f32s<T: Scalar>(w: &mut impl Write, m: &Matrix<T>) -> Result<()> {
    for &x in m.as_slice() {
        w.write_all(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes())?;
    }
    Ok(())
}

fn get_f32s<T: Scalar>(r: &mut impl Read, rows: usize, cols: usize) -> Result<Matrix<T>> {
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

impl<T: Scalar> EncoderParams<T> {
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        self.check_chain()?;
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&self.activation.code().to_le_bytes())?;
        put_u64(w, self.layer_weights.len())?;
        for l in &self.layer_weights {
            put_u64(w, l.rows())?;
            put_u64(w, l.cols())?;
        }
        put_u64(w, self.proj_w1.rows())?;
        put_u64(w, self.proj_w1.cols())?;
        put_u64(w, self.proj_w2.cols())?;
        for t in self.tensors() {
            put_f32s(w, t)?;
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::Format("missing GSCLP1 magic".into()));
        }
        let activation = Activation::from_code(get_u64(r)? as u64)?;
        let l = get_u64(r)?;
        if l == 0 || l > 64 {
            return Err(Error::Format(format!("implausible layer count {l}")));
        }
        let dims = (0..l)
            .map(|_| Ok((get_u64(r)?, get_u64(r)?)))
            .collect::<Result<Vec<_>>>()?;
        let (pin, phid, pout) = (get_u64(r)?, get_u64(r)?, get_u64(r)?);
        let layer_weights = dims
            .iter()
            .map(|&(a, b)| get_f32s(r, a, b))
            .collect::<Result<Vec<_>>>()?;
        let p = Self {
            layer_weights,
            proj_w1: get_f32s(r, pin, phid)?,
            proj_b1: get_f32s(r, 1, phid)?,
            proj_w2: get_f32s(r, phid, pout)?,
            proj_b2: get_f32s(r, 1, pout)?,
            activation,
        };
        p.check_chain()?;
        Ok(p)
    }
}

pub fn write_embeddings<T: Scalar>(w: &mut impl Write, h: &Matrix<T>) -> Result<()> {
    w.write_all(EMBED_MAGIC)?;
    put_u64(w, h.rows())?;
    put_u64(w, h.cols())?;
    put_f32s(w, h)
}

pub fn read_embeddings<T: Scalar>(r: &mut impl Read) -> Result<Matrix<T>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != EMBED_MAGIC {
        return Err(Error::Format("missing GSCLE1 magic".into()));
    }
    let rows = get_u64(r)?;
    let cols = get_u64(r)?;
    get_f32s(r, rows, cols)
}
