//! `gscl` command-line interface.
//!
//! Exit codes: 0 success, 1 user error (bad flags, config, or input files),
//! 2 numeric failure (non-finite loss, failed verification).

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use gscl::encoder::{encode, read_embeddings, EncoderParams};
use gscl::eval::Split;
use gscl::graph::{load_graph, partition_anchors};
use gscl::metrics::{hop_counts, hop_size_histogram};
use gscl::pipeline::{derive_seed, evaluate, run_sweep, run_train, RunConfig, SweepSpec};
use gscl::verify::{self, Level};
use gscl::{Error, Graph32, Matrix32};

#[derive(Parser)]
#[command(name = "gscl", version, about = "Multi-hop ranking contrastive learning on graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hop-size histogram, label consistency per hop, and homophily.
    Stats(StatsArgs),
    /// Train an encoder and write a run directory.
    Train(TrainArgs),
    /// Evaluate embeddings or a checkpoint on a labeled graph.
    Eval(EvalArgs),
    /// Grid search over a base config.
    Sweep(SweepArgs),
    /// Run the gradient, score-count and oracle self-checks.
    Verify(VerifyArgs),
}

#[derive(Args, Clone)]
struct GraphArgs {
    /// Edge list (`u v` per line) or a GSCL1 graph cache.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Feature CSV with a header row.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Label CSV `node_id,class_id` with a header row.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Also write the loaded graph as a GSCL1 cache.
    #[arg(long)]
    write_cache: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// RunConfig JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    graph: GraphArgs,
    /// Split CSV `node_id,split` (train/val/test).
    #[arg(long)]
    split: Option<PathBuf>,
    /// Run directory; defaults to `runs/<config hash prefix>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// relu, prelu, rrelu
    #[arg(long)]
    activation: Option<String>,
    /// pairwise, listwise, infonce_in_flat, infonce_out_flat
    #[arg(long)]
    variant: Option<String>,
    /// inside or outside
    #[arg(long)]
    grouping: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau_base: Option<f64>,
    #[arg(long)]
    tau_spacing: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    negative_cap: Option<usize>,
    /// none, uniform, pagerank
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long, conflicts_with = "sample_size")]
    sample_ratio: Option<f64>,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    pr_damping: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Take the dataset from this RunConfig JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    split: Option<PathBuf>,
    /// Embeddings file written by `train`.
    #[arg(long, conflicts_with = "params")]
    embeddings: Option<PathBuf>,
    /// Checkpoint written by `train`; embeddings are recomputed.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Hops for per-hop similarity; defaults to the config value or 2.
    #[arg(long)]
    k: Option<usize>,
    /// Seeds the split, partitions and probe; defaults to the config seed or 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Far-field cap; defaults to the config value or 256.
    #[arg(long)]
    negative_cap: Option<usize>,
    /// Also write the metrics as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON with `base` (a RunConfig) and `grid` (dotted path -> values).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "quick")]
    level: String,
}

fn read_text(p: &Path) -> Result<String, Error> {
    fs::read_to_string(p).map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", p.display())))
}

/// Pretty JSON on stdout; a closed pipe is not an error.
fn emit(v: &impl serde::Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn is_cache(p: &Path) -> bool {
    use std::io::Read;
    let mut magic = [0u8; 5];
    fs::File::open(p)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map(|_| &magic == b"GSCL1")
        .unwrap_or(false)
}

fn load(args: &GraphArgs) -> Result<Graph32, Error> {
    let graph = args
        .graph
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--graph is required".into()))?;
    if is_cache(graph) {
        let g = Graph32::read_binary(&mut BufReader::new(fs::File::open(graph)?))?;
        return match &args.labels {
            Some(l) => {
                let n = g.num_nodes();
                g.with_labels(gscl::graph::parse_labels(&read_text(l)?, n)?)
            }
            None => Ok(g),
        };
    }
    let features = args
        .features
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--features is required with a text edge list".into()))?;
    let labels = args.labels.as_deref().map(read_text).transpose()?;
    load_graph(&read_text(graph)?, &read_text(features)?, labels.as_deref())
}

fn stats(a: StatsArgs) -> Result<(), Error> {
    let g = load(&a.graph)?;
    if let Some(p) = &a.write_cache {
        let mut w = std::io::BufWriter::new(fs::File::create(p)?);
        g.write_binary(&mut w)?;
    }
    let out = if g.labels().is_some() {
        serde_json::to_value(hop_size_histogram(&g, a.k)?)?
    } else {
        json!({ "per_hop_avg_count": hop_counts(&g, a.k)? })
    };
    let mut obj = out;
    obj["num_nodes"] = json!(g.num_nodes());
    obj["num_edges"] = json!(g.nnz() / 2);
    emit(&obj)?;
    Ok(())
}

fn set(obj: &mut Map<String, Value>, path: &[&str], v: Value) {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = obj;
    for p in parents {
        cur = cur
            .entry((*p).to_string())
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .expect("config sections are objects");
    }
    cur.insert((*last).to_string(), v);
}

fn apply_overrides(obj: &mut Map<String, Value>, o: &Overrides) {
    macro_rules! put {
        ($field:expr, $($path:literal).+) => {
            if let Some(v) = &$field {
                set(obj, &[$($path),+], json!(v));
            }
        };
    }
    put!(o.seed, "seed");
    put!(o.epochs, "epochs");
    put!(o.lr, "lr");
    put!(o.weight_decay, "weight_decay");
    put!(o.embedding_dim, "embedding_dim");
    put!(o.layers, "layers");
    put!(o.activation, "activation");
    put!(o.variant, "loss"."variant");
    put!(o.grouping, "loss"."positive_grouping");
    put!(o.k, "loss"."k");
    put!(o.tau_base, "loss"."tau_base");
    put!(o.tau_spacing, "loss"."tau_spacing");
    put!(o.alpha, "loss"."alpha");
    put!(o.beta, "loss"."beta");
    put!(o.negative_cap, "negative_cap");
    put!(o.eval_every, "eval_every");
    put!(o.batch_size, "batch_size");
    put!(o.pr_damping, "sampler"."damping");
    if let Some(s) = &o.sampler {
        set(obj, &["sampler", "strategy"], json!(s));
    }
    if let Some(r) = o.sample_ratio {
        set(obj, &["sampler", "size"], json!({ "ratio": r }));
    }
    if let Some(s) = o.sample_size {
        set(obj, &["sampler", "size"], json!({ "absolute": s }));
    }
}

/// Fills sampler defaults so partial `sampler` objects deserialize.
fn complete_sampler(obj: &mut Map<String, Value>) -> Result<(), Error> {
    if let Some(Value::Object(s)) = obj.get_mut("sampler") {
        let defaults = serde_json::to_value(gscl::sampling::SamplerConfig::default())?;
        for (k, v) in defaults.as_object().expect("struct serializes to object") {
            s.entry(k.clone()).or_insert(v.clone());
        }
    }
    if let Some(Value::Object(l)) = obj.get_mut("loss") {
        let defaults = serde_json::to_value(gscl::LossConfig::default())?;
        for (k, v) in defaults.as_object().expect("struct serializes to object") {
            l.entry(k.clone()).or_insert(v.clone());
        }
    }
    Ok(())
}

fn build_config(config: Option<&Path>, graph: &GraphArgs, split: Option<&Path>, o: &Overrides) -> Result<RunConfig, Error> {
    let mut obj = match config {
        Some(p) => match serde_json::from_str::<Value>(&read_text(p)?)? {
            Value::Object(m) => m,
            _ => return Err(Error::InvalidArgument("config must be a JSON object".into())),
        },
        None => Map::new(),
    };
    if let Some(g) = &graph.graph {
        let dataset = if is_cache(g) {
            json!({ "kind": "binary", "path": g, "split": split })
        } else {
            json!({ "kind": "files", "edges": g, "features": graph.features, "labels": graph.labels, "split": split })
        };
        obj.insert("dataset".into(), dataset);
    } else if let Some(s) = split {
        match obj.get_mut("dataset") {
            Some(Value::Object(d)) => {
                d.insert("split".into(), json!(s));
            }
            _ => return Err(Error::InvalidArgument("--split needs a file-based dataset".into())),
        }
    }
    apply_overrides(&mut obj, o);
    complete_sampler(&mut obj)?;
    if !obj.contains_key("dataset") {
        return Err(Error::InvalidArgument("no dataset: pass --config or --graph/--features".into()));
    }
    if !obj.contains_key("seed") {
        return Err(Error::InvalidArgument("a seed is required (--seed or in the config)".into()));
    }
    let cfg: RunConfig = serde_json::from_value(Value::Object(obj))
        .map_err(|e| Error::InvalidArgument(format!("bad config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let cfg = build_config(a.config.as_deref(), &a.graph, a.split.as_deref(), &a.overrides)?;
    let out = a
        .out
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.hash()[..16]));
    let result = run_train::<f32>(&cfg, &out)?;
    let summary = json!({
        "run_dir": out,
        "config_hash": cfg.hash(),
        "epochs": result.log.len(),
        "final_loss": result.log.last().map(|r| r.loss),
        "eval": result.final_eval,
    });
    emit(&summary)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let cfg = a.config.as_deref().map(|p| RunConfig::from_json(&read_text(p)?)).transpose()?;
    let (g, split) = match &cfg {
        Some(c) => c.dataset.load::<f32>()?,
        None => (load(&a.graph)?, None),
    };
    let seed = a.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    let k = a.k.or(cfg.as_ref().map(|c| c.loss.k)).unwrap_or(2);
    let cap = match (a.negative_cap, &cfg) {
        (Some(c), _) => Some(c),
        (None, Some(c)) => c.negative_cap,
        (None, None) => Some(256),
    };
    let split = match &a.split {
        Some(p) => Split::from_csv(&read_text(p)?, g.num_nodes())?,
        None => match split {
            Some(s) => s,
            None => Split::standard(g.num_nodes(), derive_seed(seed, 2))?,
        },
    };
    let h: Matrix32 = match (&a.embeddings, &a.params) {
        (Some(p), _) => read_embeddings(&mut BufReader::new(fs::File::open(p)?))?,
        (None, Some(p)) => {
            let params = EncoderParams::<f32>::read_checkpoint(&mut BufReader::new(fs::File::open(p)?))?;
            encode(&g, &params)?
        }
        (None, None) => return Err(Error::InvalidArgument("pass --embeddings or --params".into())),
    };
    if h.rows() != g.num_nodes() {
        return Err(Error::RowMismatch {
            what: "graph nodes",
            features: h.rows(),
            expected: g.num_nodes(),
        });
    }
    let anchors: Vec<usize> = (0..g.num_nodes()).collect();
    let parts = partition_anchors(&g, &anchors, k, cap, derive_seed(seed, 1))?;
    let report = evaluate(&h, &g, &split, &parts, seed)?;
    if let Some(p) = &a.csv {
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("accuracy,{}\nval_accuracy,{}\nnmi,{}\nsim_at_5,{}\n", report.accuracy, report.val_accuracy, report.nmi, report.sim_at_5));
        for (i, m) in report.per_hop.means.iter().enumerate() {
            s.push_str(&format!("hop{}_similarity,{m}\n", i + 1));
        }
        fs::write(p, s)?;
    }
    emit(&report)?;
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), Error> {
    let spec: SweepSpec = serde_json::from_str(&read_text(&a.spec)?)
        .map_err(|e| Error::InvalidArgument(format!("bad sweep spec: {e}")))?;
    let outcome = run_sweep::<f32>(&spec, &a.out)?;
    emit(&outcome)?;
    Ok(())
}

/// Returns whether every check passed.
fn verify_cmd(a: VerifyArgs) -> Result<bool, Error> {
    let level: Level = a.level.parse()?;
    let report = verify::run(level);
    for c in &report.checks {
        println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Stats(a) => stats(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Verify(a) => match verify_cmd(a) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Error::Numeric("verification failed".into())),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
