//! Run configuration, the training loop, evaluation reports, run-directory
//! outputs and grid sweeps.
//!
//! A run is fully determined by its [`RunConfig`]: every random draw comes
//! from ChaCha streams derived from `seed`, and all parallel reductions use
//! a fixed order, so repeated runs produce byte-identical outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::encoder::{
    encode_with, forward_on_tape, init_params, normalize_adjacency, record_params, write_embeddings, Activation,
    EncoderParams,
};
use crate::error::{Error, Result};
use crate::eval::{kmeans_nmi, linear_probe_with, per_hop_similarity, sim_at_k, PerHopSimilarity, ProbeConfig, Split};
use crate::generate::SbmConfig;
use crate::graph::{load_graph, partition_anchors, Graph, HopPartition, NodeId};
use crate::loss::{gscl_loss, LossConfig, ScoreCallCounter};
use crate::matrix::{Matrix, SparseMatrix};
use crate::optim::{AdamConfig, AdamState};
use crate::sampling::{pagerank, sample_partition, SamplerConfig, SamplerStrategy};
use crate::scalar::Scalar;

/// Graphs up to this size train on all anchors per step.
pub const FULL_BATCH_MAX_NODES: usize = 20_000;
pub const DEFAULT_BATCH_SIZE: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Files {
        edges: PathBuf,
        features: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        split: Option<PathBuf>,
    },
    /// GSCL1 graph cache.
    Binary {
        path: PathBuf,
        #[serde(default)]
        split: Option<PathBuf>,
    },
    Sbm(SbmConfig),
}

impl DatasetSource {
    /// Loads the graph and, when a split file is named, its split.
    pub fn load<T: Scalar>(&self) -> Result<(Graph<T>, Option<Split>)> {
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", p.display())))
        };
        let (g, split_path) = match self {
            DatasetSource::Files {
                edges,
                features,
                labels,
                split,
            } => {
                let labels = labels.as_deref().map(read).transpose()?;
                (load_graph(&read(edges)?, &read(features)?, labels.as_deref())?, split.as_deref())
            }
            DatasetSource::Binary { path, split } => {
                let f = fs::File::open(path)
                    .map_err(|e| Error::InvalidArgument(format!("cannot open {}: {e}", path.display())))?;
                (Graph::read_binary(&mut BufReader::new(f))?, split.as_deref())
            }
            DatasetSource::Sbm(cfg) => (cfg.generate()?, None),
        };
        let split = split_path
            .map(|p| Split::from_csv(&read(p)?, g.num_nodes()))
            .transpose()?;
        Ok((g, split))
    }
}

fn default_embedding_dim() -> usize {
    128
}
fn default_layers() -> usize {
    2
}
fn default_activation() -> Activation {
    Activation::Prelu
}
fn default_negative_cap() -> Option<usize> {
    Some(256)
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Width of every GCN layer, including the output.
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Projection hidden width; defaults to `embedding_dim`.
    #[serde(default)]
    pub proj_hidden: Option<usize>,
    /// Projection output width; defaults to `embedding_dim`.
    #[serde(default)]
    pub proj_dim: Option<usize>,
    #[serde(default)]
    pub loss: LossConfig,
    /// Far-field sample size per anchor; `None` keeps every far node.
    #[serde(default = "default_negative_cap")]
    pub negative_cap: Option<usize>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Evaluate every this many epochs (0 = only after training).
    #[serde(default)]
    pub eval_every: usize,
    /// Anchors per optimizer step; default is all anchors on graphs up to
    /// [`FULL_BATCH_MAX_NODES`] nodes and [`DEFAULT_BATCH_SIZE`] above.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl RunConfig {
    pub fn new(dataset: DatasetSource, seed: u64) -> Self {
        Self {
            dataset,
            embedding_dim: default_embedding_dim(),
            layers: default_layers(),
            activation: default_activation(),
            proj_hidden: None,
            proj_dim: None,
            loss: LossConfig::default(),
            negative_cap: default_negative_cap(),
            lr: default_lr(),
            weight_decay: 0.0,
            epochs: default_epochs(),
            seed,
            sampler: SamplerConfig::default(),
            eval_every: 0,
            batch_size: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let in_range = |x: f64, lo: f64, hi: f64| x >= lo && x <= hi;
        if !(1..=3).contains(&self.layers) {
            return bad(format!("layers {} not in 1..=3", self.layers));
        }
        if self.embedding_dim == 0 || self.proj_hidden == Some(0) || self.proj_dim == Some(0) {
            return bad("embedding and projection widths must be >= 1".into());
        }
        self.loss.validate()?;
        let l = &self.loss;
        if !(1..=4).contains(&l.k) {
            return bad(format!("k {} not in 1..=4", l.k));
        }
        if !in_range(l.tau_base, 0.1, 0.9) {
            return bad(format!("tau_base {} not in [0.1, 0.9]", l.tau_base));
        }
        if !in_range(l.tau_spacing, 0.0, 0.1) {
            return bad(format!("tau_spacing {} not in [0, 0.1]", l.tau_spacing));
        }
        for (name, g) in [("alpha", l.alpha), ("beta", l.beta)] {
            if !in_range(g, 1e-4, 1.0) {
                return bad(format!("{name} {g} not in [0.0001, 1]"));
            }
        }
        for (name, x) in [("lr", self.lr), ("weight_decay", self.weight_decay)] {
            if !(x == 0.0 || in_range(x, 1e-8, 1e-2)) {
                return bad(format!("{name} {x} not 0 or in [1e-8, 1e-2]"));
            }
        }
        if self.negative_cap == Some(0) || self.batch_size == Some(0) {
            return bad("negative_cap and batch_size must be >= 1".into());
        }
        self.sampler.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr, self.weight_decay)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        std::iter::once(input_dim)
            .chain(std::iter::repeat_n(self.embedding_dim, self.layers))
            .collect()
    }

    fn proj_dims(&self) -> (usize, usize) {
        (
            self.proj_hidden.unwrap_or(self.embedding_dim),
            self.proj_dim.unwrap_or(self.embedding_dim),
        )
    }
}

/// Independent seed for a named purpose.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng.next_u64()
}

const SEED_PARTITION: u64 = 1;
const SEED_SPLIT: u64 = 2;
const SEED_SHUFFLE: u64 = 3;
const SEED_EPOCH_BASE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub nmi: f64,
    pub sim_at_5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub nmi: f64,
    pub sim_at_5: f64,
    pub per_hop: PerHopSimilarity,
}

impl EvalReport {
    pub fn snapshot(&self) -> EvalSnapshot {
        EvalSnapshot {
            val_accuracy: self.val_accuracy,
            test_accuracy: self.accuracy,
            nmi: self.nmi,
            sim_at_5: self.sim_at_5,
        }
    }
}

fn snapshot_of<T: Scalar>(h: &Matrix<T>, labels: &[usize], num_classes: usize, split: &Split, seed: u64) -> Result<EvalSnapshot> {
    let probe = linear_probe_with(h, labels, split, seed, &ProbeConfig::default())?;
    let nmi = if num_classes >= 2 { kmeans_nmi(h, labels, num_classes, seed)? } else { f64::NAN };
    let sim = if h.rows() > 5 { sim_at_k(h, labels, 5)? } else { f64::NAN };
    Ok(EvalSnapshot {
        val_accuracy: probe.val_accuracy,
        test_accuracy: probe.test_accuracy,
        nmi,
        sim_at_5: sim,
    })
}

/// Linear probe, clustering NMI, Sim@5 and per-hop similarity of `h`.
pub fn evaluate<T: Scalar>(
    h: &Matrix<T>,
    g: &Graph<T>,
    split: &Split,
    partitions: &[HopPartition],
    seed: u64,
) -> Result<EvalReport> {
    let labels = g.labels().ok_or(Error::MissingLabels)?;
    let s = snapshot_of(h, labels, g.num_classes(), split, seed)?;
    Ok(EvalReport {
        accuracy: s.test_accuracy,
        val_accuracy: s.val_accuracy,
        nmi: s.nmi,
        sim_at_5: s.sim_at_5,
        per_hop: per_hop_similarity(h, partitions)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalSnapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Training stopped on a non-finite loss or gradient; params are the
    /// last finite ones.
    Aborted { epoch: usize, reason: String },
}

pub struct TrainOutcome<T> {
    pub initial_params: EncoderParams<T>,
    pub params: EncoderParams<T>,
    /// Encoder output `H` for the final params.
    pub embeddings: Matrix<T>,
    pub log: Vec<EpochRecord>,
    pub status: RunStatus,
    /// Partitions without down-sampling, used for reporting.
    pub partitions: Vec<HopPartition>,
    pub split: Option<Split>,
    pub final_eval: Option<EvalReport>,
    /// Best periodic evaluation by validation accuracy, with its epoch.
    pub best_eval: Option<(usize, EvalSnapshot)>,
}

struct StepInputs<'a, T> {
    adj: &'a Arc<SparseMatrix<T>>,
    features: &'a Matrix<T>,
    loss: &'a LossConfig,
    counter: Option<&'a ScoreCallCounter>,
}

/// Loss and parameter gradients for one batch.
fn loss_and_grads<T: Scalar>(
    inp: &StepInputs<'_, T>,
    params: &EncoderParams<T>,
    batch: &[HopPartition],
) -> Result<(f64, Vec<Matrix<T>>)> {
    let mut tape = Tape::new();
    let x = tape.constant(inp.features.clone());
    let vars = record_params(&mut tape, params);
    let (_, z) = forward_on_tape(&mut tape, inp.adj, x, &vars, params.activation)?;
    let loss = gscl_loss(&mut tape, z, batch, inp.loss, inp.counter)?;
    let value = tape.scalar(loss).to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    let grads = tape.backward(loss)?;
    let g: Vec<Matrix<T>> = vars.all().into_iter().map(|v| grads.wrt(v)).collect();
    if g.iter().any(|m| !m.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((value, g))
}

fn epoch_partitions<T: Scalar>(
    g: &Graph<T>,
    base: &[HopPartition],
    anchors: &[NodeId],
    cfg: &RunConfig,
    scores: Option<&[f64]>,
    epoch: usize,
) -> Result<Vec<HopPartition>> {
    if cfg.sampler.strategy == SamplerStrategy::None {
        return Ok(base.to_vec());
    }
    let seed = derive_seed(cfg.seed, SEED_EPOCH_BASE + epoch as u64);
    let fresh = partition_anchors(g, anchors, cfg.loss.k, cfg.negative_cap, seed)?;
    use rayon::prelude::*;
    fresh
        .par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A_5A5A);
            rng.set_stream(p.anchor as u64);
            sample_partition(p, &cfg.sampler, scores, &mut rng)
        })
        .collect()
}

/// Trains an encoder on `g` in memory. `split` overrides the default
/// random split used for evaluation of labeled graphs.
pub fn train<T: Scalar>(g: &Graph<T>, split: Option<Split>, cfg: &RunConfig) -> Result<TrainOutcome<T>> {
    train_with_counter(g, split, cfg, None)
}

pub fn train_with_counter<T: Scalar>(
    g: &Graph<T>,
    split: Option<Split>,
    cfg: &RunConfig,
    counter: Option<&ScoreCallCounter>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let n = g.num_nodes();
    if n == 0 {
        return Err(Error::InvalidArgument("graph has no nodes".into()));
    }
    let labels = g.labels();
    let split = match (split, labels) {
        (Some(s), _) => {
            s.validate(n)?;
            Some(s)
        }
        (None, Some(_)) => Some(Split::standard(n, derive_seed(cfg.seed, SEED_SPLIT))?),
        (None, None) => None,
    };

    let adj = Arc::new(normalize_adjacency(g));
    let initial = init_params::<T>(&cfg.layer_dims(g.feature_dim()), cfg.proj_dims(), cfg.activation, cfg.seed)?;
    let mut params = initial.clone();
    let anchors: Vec<NodeId> = (0..n).collect();
    let base = partition_anchors(g, &anchors, cfg.loss.k, cfg.negative_cap, derive_seed(cfg.seed, SEED_PARTITION))?;
    let pr = match cfg.sampler.strategy {
        SamplerStrategy::Pagerank => {
            Some(pagerank(g, cfg.sampler.damping, cfg.sampler.pr_tolerance, cfg.sampler.pr_max_iters)?.scores)
        }
        _ => None,
    };
    let batch_size = cfg
        .batch_size
        .unwrap_or(if n <= FULL_BATCH_MAX_NODES { n } else { DEFAULT_BATCH_SIZE });
    let adam = cfg.adam();
    let mut opt = AdamState::<T>::new(params.tensors().iter().map(|t| t.shape()));
    let inputs = StepInputs {
        adj: &adj,
        features: g.features(),
        loss: &cfg.loss,
        counter,
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best_eval: Option<(usize, EvalSnapshot)> = None;
    let mut status = RunStatus::Completed;
    'epochs: for epoch in 1..=cfg.epochs {
        let parts = epoch_partitions(g, &base, &anchors, cfg, pr.as_deref(), epoch)?;
        let mut order: Vec<usize> = (0..n).collect();
        if batch_size < n {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_SHUFFLE));
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
        }
        let mut weighted = 0.0;
        let mut counted = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<HopPartition> = chunk.iter().map(|&i| parts[i].clone()).collect();
            let (loss, grads) = match loss_and_grads(&inputs, &params, &batch) {
                Ok(v) => v,
                Err(Error::NoRankingSignal) if batch_size < n => continue,
                Err(e) if e.is_numeric() => {
                    status = RunStatus::Aborted {
                        epoch,
                        reason: e.to_string(),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let mut next = params.clone();
            opt.step(&adam, &mut next.tensors_mut(), &grads)?;
            if !next.is_finite() {
                status = RunStatus::Aborted {
                    epoch,
                    reason: "non-finite parameters after update".into(),
                };
                break 'epochs;
            }
            params = next;
            weighted += loss * chunk.len() as f64;
            counted += chunk.len();
        }
        let mut rec = EpochRecord {
            epoch,
            loss: if counted > 0 { weighted / counted as f64 } else { f64::NAN },
            eval: None,
        };
        if let (true, Some(labels), Some(split)) = (cfg.eval_every > 0 && epoch % cfg.eval_every == 0, labels, &split) {
            let h = encode_with(&adj, g.features(), &params)?;
            let snap = snapshot_of(&h, labels, g.num_classes(), split, cfg.seed)?;
            if best_eval.is_none_or(|(_, b)| snap.val_accuracy > b.val_accuracy) {
                best_eval = Some((epoch, snap));
            }
            rec.eval = Some(snap);
        }
        log.push(rec);
    }

    let embeddings = encode_with(&adj, g.features(), &params)?;
    let final_eval = match (&split, labels, &status) {
        (Some(s), Some(_), RunStatus::Completed) => Some(evaluate(&embeddings, g, s, &base, cfg.seed)?),
        _ => None,
    };
    Ok(TrainOutcome {
        initial_params: initial,
        params,
        embeddings,
        log,
        status,
        partitions: base,
        split,
        final_eval,
        best_eval,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub scalar: String,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub epochs_run: usize,
    #[serde(flatten)]
    pub status: RunStatus,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const PARAMS_FILE: &str = "params.bin";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const RESULTS_FILE: &str = "results.csv";

fn fmt_metric(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `metric,final,best` rows; `best` is the best periodic evaluation.
pub fn results_csv<T>(out: &TrainOutcome<T>) -> String {
    let mut s = String::from("metric,final,best\n");
    let final_loss = out.log.last().map(|r| r.loss);
    s.push_str(&format!("loss,{},\n", fmt_metric(final_loss)));
    let best = out.best_eval.map(|(_, b)| b);
    if let Some(r) = &out.final_eval {
        let rows = [
            ("accuracy", r.accuracy, best.map(|b| b.test_accuracy)),
            ("val_accuracy", r.val_accuracy, best.map(|b| b.val_accuracy)),
            ("nmi", r.nmi, best.map(|b| b.nmi)),
            ("sim_at_5", r.sim_at_5, best.map(|b| b.sim_at_5)),
        ];
        for (name, f, b) in rows {
            s.push_str(&format!("{name},{f},{}\n", fmt_metric(b)));
        }
        for (h, m) in r.per_hop.means.iter().enumerate() {
            s.push_str(&format!("hop{}_similarity,{m},\n", h + 1));
        }
    }
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

/// Writes the run directory for a finished (or aborted) training run.
pub fn write_run_dir<T: Scalar>(dir: &Path, cfg: &RunConfig, g: &Graph<T>, out: &TrainOutcome<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        scalar: T::NAME.to_string(),
        num_nodes: g.num_nodes(),
        num_edges: g.nnz() / 2,
        epochs_run: out.log.len(),
        status: out.status.clone(),
    };
    write_file(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    let mut metrics = Vec::new();
    for rec in &out.log {
        serde_json::to_writer(&mut metrics, rec)?;
        metrics.push(b'\n');
    }
    write_file(&dir.join(METRICS_FILE), &metrics)?;
    let mut buf = Vec::new();
    out.params.write_checkpoint(&mut buf)?;
    write_file(&dir.join(PARAMS_FILE), &buf)?;
    let mut buf = Vec::new();
    write_embeddings(&mut buf, &out.embeddings)?;
    write_file(&dir.join(EMBEDDINGS_FILE), &buf)?;
    write_file(&dir.join(RESULTS_FILE), results_csv(out).as_bytes())?;
    Ok(())
}

/// Loads the dataset, trains, and writes the run directory. An aborted run
/// still writes its last finite checkpoint and then fails with a numeric
/// error.
pub fn run_train<T: Scalar>(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let (g, split) = cfg.dataset.load::<T>()?;
    let out = train(&g, split, cfg)?;
    write_run_dir(out_dir, cfg, &g, &out)?;
    if let RunStatus::Aborted { epoch, reason } = &out.status {
        return Err(Error::Numeric(format!("training aborted at epoch {epoch}: {reason}")));
    }
    Ok(out)
}

/// Base config plus a grid over dotted JSON paths into it, e.g.
/// `"loss.tau_base": [0.3, 0.5]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: RunConfig,
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<Value>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub hash: String,
    pub overrides: BTreeMap<String, Value>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub best_index: usize,
    pub best_config: RunConfig,
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("grid path {path:?} does not lead into an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*key).to_string(), v);
            return Ok(());
        }
        cur = obj
            .entry((*key).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::InvalidArgument("empty grid path".into()))
}

impl SweepSpec {
    /// Every grid point in lexicographic key order, as overrides and config.
    pub fn expand(&self) -> Result<Vec<(BTreeMap<String, Value>, RunConfig)>> {
        if self.grid.values().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("sweep grid has an axis with no values".into()));
        }
        let mut points: Vec<BTreeMap<String, Value>> = vec![BTreeMap::new()];
        for (key, values) in &self.grid {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.insert(key.clone(), v.clone());
                        q
                    })
                })
                .collect();
        }
        let base = serde_json::to_value(&self.base)?;
        points
            .into_iter()
            .map(|ov| {
                let mut v = base.clone();
                for (k, x) in &ov {
                    set_path(&mut v, k, x.clone())?;
                }
                let cfg: RunConfig = serde_json::from_value(v)?;
                cfg.validate()?;
                Ok((ov, cfg))
            })
            .collect()
    }
}

const SWEEP_DONE_FILE: &str = "sweep_row.json";

/// Runs every grid point sequentially under `out_dir/runs/<hash>`. Points
/// whose directory already holds a completion record are not rerun. The
/// best point maximizes validation accuracy; the first wins ties.
pub fn run_sweep<T: Scalar>(spec: &SweepSpec, out_dir: &Path) -> Result<SweepOutcome> {
    let points = spec.expand()?;
    let mut rows = Vec::with_capacity(points.len());
    for (ov, cfg) in &points {
        let hash = cfg.hash();
        let dir = out_dir.join("runs").join(&hash[..16]);
        let done = dir.join(SWEEP_DONE_FILE);
        if let Ok(text) = fs::read_to_string(&done) {
            if let Ok(row) = serde_json::from_str::<SweepRow>(&text) {
                if row.hash == hash {
                    rows.push(row);
                    continue;
                }
            }
        }
        let out = run_train::<T>(cfg, &dir)?;
        let r = out.final_eval.as_ref().ok_or(Error::MissingLabels)?;
        let row = SweepRow {
            hash,
            overrides: ov.clone(),
            val_accuracy: r.val_accuracy,
            test_accuracy: r.accuracy,
        };
        write_file(&done, &serde_json::to_vec(&row)?)?;
        rows.push(row);
    }
    let mut best_index = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.val_accuracy > rows[best_index].val_accuracy {
            best_index = i;
        }
    }
    let outcome = SweepOutcome {
        best_config: points[best_index].1.clone(),
        rows,
        best_index,
    };
    let mut table = String::from("hash,overrides,val_accuracy,test_accuracy\n");
    for r in &outcome.rows {
        let ov = serde_json::to_string(&r.overrides)?.replace('"', "\"\"");
        table.push_str(&format!("{},\"{ov}\",{},{}\n", r.hash, r.val_accuracy, r.test_accuracy));
    }
    fs::create_dir_all(out_dir)?;
    write_file(&out_dir.join("sweep.csv"), table.as_bytes())?;
    write_file(&out_dir.join("best.json"), &serde_json::to_vec_pretty(&outcome.best_config)?)?;
    Ok(outcome)
}
